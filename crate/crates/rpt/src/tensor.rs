//! Dense tensors and the binary container every pipeline artifact uses.
//!
//! The on-disk layout is deliberately tiny: a 4-byte magic, a format version,
//! a dtype code, a rank, `rank` little-endian u32 dims, then the row-major
//! payload. Keeping images, label maps, probability maps, feature maps, and
//! superpixel maps in one container means a single reader/writer pair to get
//! bit-exact, and loaders can be fuzzed in one place.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, RptError};

/// Label value excluded from every loss and every metric.
pub const IGNORE_LABEL: u8 = 255;

const MAGIC: [u8; 4] = *b"RPTT";
const FORMAT_VERSION: u8 = 1;
const MAX_RANK: usize = 8;
/// Upper bound on element count; keeps corrupt headers from driving huge allocations.
const MAX_ELEMS: u64 = 1 << 31;

/// Element type codes as stored in the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
    U16 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            3 => Some(DType::U16),
            _ => None,
        }
    }

    /// Payload bytes per element.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor tagged with its dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

fn checked_elem_count(dims: &[u32]) -> Result<u64> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(RptError::Format(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    let mut n: u64 = 1;
    for &d in dims {
        if d == 0 {
            return Err(RptError::Format("tensor dims must be nonzero".into()));
        }
        n = n
            .checked_mul(d as u64)
            .ok_or_else(|| RptError::Format("tensor dims overflow".into()))?;
        if n > MAX_ELEMS {
            return Err(RptError::Format(format!(
                "tensor has {n} elements, limit is {MAX_ELEMS}"
            )));
        }
    }
    Ok(n)
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Tensor> {
        let n = checked_elem_count(&dims)?;
        if n != data.len() as u64 {
            return Err(RptError::Length(format!(
                "tensor dims {:?} imply {} elements, data holds {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: Vec<u32>, data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<u32>, data: Vec<u8>) -> Result<Tensor> {
        Tensor::new(dims, TensorData::U8(data))
    }

    pub fn u16(dims: Vec<u32>, data: Vec<u16>) -> Result<Tensor> {
        Tensor::new(dims, TensorData::U16(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Header size in bytes for a tensor of the given rank.
    pub fn header_len(rank: usize) -> usize {
        // magic + version + dtype + rank byte + one u32 per dim
        4 + 1 + 1 + 1 + 4 * rank
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&[FORMAT_VERSION, self.dtype().code(), self.rank() as u8])?;
        for &d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::U8(v) => w.write_all(v)?,
            TensorData::U16(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Parses a tensor from a reader and rejects trailing bytes.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut head = [0u8; 7];
        r.read_exact(&mut head)
            .map_err(|_| RptError::Length("container shorter than fixed header".into()))?;
        if head[0..4] != MAGIC {
            return Err(RptError::Format(format!(
                "bad magic {:?}, expected {:?}",
                &head[0..4],
                MAGIC
            )));
        }
        if head[4] != FORMAT_VERSION {
            return Err(RptError::Format(format!(
                "unsupported container version {}",
                head[4]
            )));
        }
        let dtype = DType::from_code(head[5])
            .ok_or_else(|| RptError::Format(format!("unknown dtype code {}", head[5])))?;
        let rank = head[6] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(RptError::Format(format!(
                "tensor rank must be 1..={MAX_RANK}, got {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| RptError::Length("container truncated inside dims".into()))?;
            dims.push(u32::from_le_bytes(b));
        }
        let n = checked_elem_count(&dims)? as usize;
        let mut payload = vec![0u8; n * dtype.width()];
        r.read_exact(&mut payload).map_err(|_| {
            RptError::Length(format!(
                "payload truncated: expected {} bytes for dims {:?}",
                n * dtype.width(),
                dims
            ))
        })?;
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => {
                return Err(RptError::Length(
                    "trailing bytes after tensor payload".into(),
                ))
            }
            Err(e) => return Err(RptError::Format(format!("read failed after payload: {e}"))),
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
        };
        Tensor::new(dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| RptError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| RptError::io(path, e))?;
        w.flush().map_err(|e| RptError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Tensor> {
        let file = File::open(path).map_err(|e| RptError::io(path, e))?;
        let mut r = BufReader::new(file);
        Tensor::read_from(&mut r)
            .map_err(|e| match e {
                RptError::Format(m) => RptError::Format(format!("{}: {m}", path.display())),
                RptError::Length(m) => RptError::Length(format!("{}: {m}", path.display())),
                other => other,
            })
    }
}

/// An RGB image with values in `[0, 1]`, stored `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Image> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RptError::Invalid("image dims must be nonzero".into()));
        }
        if data.len() != height * width * channels {
            return Err(RptError::Length(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(RptError::Invalid(format!(
                    "image values must be finite and in [0,1], found {v}"
                )));
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.height as u32, self.width as u32, self.channels as u32],
            self.data.clone(),
        )
        .expect("image dims already validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let TensorData::F32(data) = &t.data else {
            return Err(RptError::Format("image tensor must be f32".into()));
        };
        if t.rank() != 3 {
            return Err(RptError::Format(format!(
                "image tensor must be rank 3, got {}",
                t.rank()
            )));
        }
        Image::new(
            t.dims[0] as usize,
            t.dims[1] as usize,
            t.dims[2] as usize,
            data.clone(),
        )
    }
}

/// Per-pixel class labels; `IGNORE_LABEL` marks pixels outside every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<LabelMap> {
        if height == 0 || width == 0 {
            return Err(RptError::Invalid("label map dims must be nonzero".into()));
        }
        if data.len() != height * width {
            return Err(RptError::Length(format!(
                "label data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    /// Checks that every non-sentinel label is a valid class id.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != IGNORE_LABEL && (v as usize) >= classes {
                return Err(RptError::Invalid(format!(
                    "label {v} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::u8(
            vec![self.height as u32, self.width as u32],
            self.data.clone(),
        )
        .expect("label dims already validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        let TensorData::U8(data) = &t.data else {
            return Err(RptError::Format("label tensor must be u8".into()));
        };
        if t.rank() != 2 {
            return Err(RptError::Format(format!(
                "label tensor must be rank 2, got {}",
                t.rank()
            )));
        }
        LabelMap::new(t.dims[0] as usize, t.dims[1] as usize, data.clone())
    }
}

/// Maximum allowed drift of a per-pixel probability sum away from one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

/// Per-pixel class distributions, `height x width x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<ProbMap> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(RptError::Invalid("prob map dims must be nonzero".into()));
        }
        if data.len() != height * width * classes {
            return Err(RptError::Length(format!(
                "prob data length {} does not match {height}x{width}x{classes}",
                data.len()
            )));
        }
        for px in 0..height * width {
            let mut sum = 0.0f64;
            for c in 0..classes {
                let v = data[px * classes + c];
                if !v.is_finite() || v < 0.0 {
                    return Err(RptError::Invalid(format!(
                        "probabilities must be finite and nonnegative, found {v}"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(RptError::Invalid(format!(
                    "pixel {px} distribution sums to {sum}, outside 1 +/- {PROB_SUM_TOLERANCE}"
                )));
            }
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, class: usize) -> f32 {
        self.data[(row * self.width + col) * self.classes + class]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.height as u32, self.width as u32, self.classes as u32],
            self.data.clone(),
        )
        .expect("prob dims already validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<ProbMap> {
        let TensorData::F32(data) = &t.data else {
            return Err(RptError::Format("prob tensor must be f32".into()));
        };
        if t.rank() != 3 {
            return Err(RptError::Format(format!(
                "prob tensor must be rank 3, got {}",
                t.rank()
            )));
        }
        ProbMap::new(
            t.dims[0] as usize,
            t.dims[1] as usize,
            t.dims[2] as usize,
            data.clone(),
        )
    }
}

/// Per-pixel real-valued features, `height x width x depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<FeatureMap> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(RptError::Invalid("feature map dims must be nonzero".into()));
        }
        if data.len() != height * width * depth {
            return Err(RptError::Length(format!(
                "feature data length {} does not match {height}x{width}x{depth}",
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(RptError::Invalid("feature values must be finite".into()));
            }
        }
        Ok(FeatureMap {
            height,
            width,
            depth,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.depth + ch]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.height as u32, self.width as u32, self.depth as u32],
            self.data.clone(),
        )
        .expect("feature dims already validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<FeatureMap> {
        let TensorData::F32(data) = &t.data else {
            return Err(RptError::Format("feature tensor must be f32".into()));
        };
        if t.rank() != 3 {
            return Err(RptError::Format(format!(
                "feature tensor must be rank 3, got {}",
                t.rank()
            )));
        }
        FeatureMap::new(
            t.dims[0] as usize,
            t.dims[1] as usize,
            t.dims[2] as usize,
            data.clone(),
        )
    }
}
