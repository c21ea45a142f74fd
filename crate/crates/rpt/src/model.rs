//! Desk-scale segmentation network and the domain discriminator.
//!
//! The segmentation head is a per-pixel two-layer perceptron over a 3x3
//! color window plus the pixel's normalized position: 29 inputs, a tanh
//! hidden layer, and linear class scores. The discriminator is a per-pixel
//! logistic regression on that hidden layer; the adversarial loss is the
//! discriminator's cross-entropy for telling target pixels from source
//! pixels, computed in softplus form so extreme scores stay finite.
//!
//! Sign conventions: the discriminator *minimizes* the adversarial loss;
//! the segmentation model *maximizes* it (scaled by a small weight) so its
//! hidden features stop betraying the domain.

use rand::Rng;

use crate::error::{Result, RptError};
use crate::losses::Logits;
use crate::scene::FEATURE_DEPTH;
use crate::tensor::FeatureMap;

/// Color channels are divided by this before entering the network so they
/// share the positional channels' unit scale.
const COLOR_SCALE: f64 = 0.01;

/// 3x3 window over three color channels plus two positional taps.
pub const SEG_INPUT_DIM: usize = 9 * 3 + 2;

/// Per-pixel segmentation head: `29 -> hidden (tanh) -> classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SegGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SegForward {
    pub logits: Logits,
    /// Tanh activations, `height * width * hidden`.
    pub hidden: Vec<f64>,
    /// Gathered inputs, `height * width * SEG_INPUT_DIM`.
    inputs: Vec<f64>,
}

impl SegHead {
    pub fn zeros(hidden: usize, classes: usize) -> SegHead {
        SegHead {
            hidden,
            classes,
            w1: vec![0.0; hidden * SEG_INPUT_DIM],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        }
    }

    pub fn init_uniform<R: Rng>(hidden: usize, classes: usize, scale: f64, rng: &mut R) -> SegHead {
        let mut m = SegHead::zeros(hidden, classes);
        for w in m
            .w1
            .iter_mut()
            .chain(m.b1.iter_mut())
            .chain(m.w2.iter_mut())
            .chain(m.b2.iter_mut())
        {
            *w = rng.gen_range(-scale..=scale);
        }
        m
    }

    pub fn grads(&self) -> SegGrads {
        SegGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Gather the per-pixel input vector: 3x3 window (edges replicated)
    /// over the three color channels, then the center positional channels.
    fn gather(features: &FeatureMap) -> Vec<f64> {
        let (h, w) = (features.height as isize, features.width as isize);
        let ch = features.depth;
        let mut inputs = Vec::with_capacity((h * w) as usize * SEG_INPUT_DIM);
        for r in 0..h {
            for c in 0..w {
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let rr = (r + dr).clamp(0, h - 1) as usize;
                        let cc = (c + dc).clamp(0, w - 1) as usize;
                        let base = (rr * w as usize + cc) * ch;
                        for k in 0..3 {
                            inputs.push(features.data[base + k] as f64 * COLOR_SCALE);
                        }
                    }
                }
                let base = (r as usize * w as usize + c as usize) * ch;
                inputs.push(features.data[base + 3] as f64);
                inputs.push(features.data[base + 4] as f64);
            }
        }
        inputs
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<SegForward> {
        if features.depth != FEATURE_DEPTH {
            return Err(RptError::Invalid(format!(
                "segmentation input needs {FEATURE_DEPTH} channels, got {}",
                features.depth
            )));
        }
        let (h, w) = (features.height, features.width);
        let inputs = SegHead::gather(features);
        let px = h * w;
        let mut hidden = vec![0.0f64; px * self.hidden];
        let mut logits = vec![0.0f64; px * self.classes];
        for p in 0..px {
            let x = &inputs[p * SEG_INPUT_DIM..(p + 1) * SEG_INPUT_DIM];
            let hid = &mut hidden[p * self.hidden..(p + 1) * self.hidden];
            for k in 0..self.hidden {
                let row = &self.w1[k * SEG_INPUT_DIM..(k + 1) * SEG_INPUT_DIM];
                let mut acc = self.b1[k];
                for j in 0..SEG_INPUT_DIM {
                    acc += row[j] * x[j];
                }
                hid[k] = acc.tanh();
            }
            let out = &mut logits[p * self.classes..(p + 1) * self.classes];
            for cls in 0..self.classes {
                let row = &self.w2[cls * self.hidden..(cls + 1) * self.hidden];
                let mut acc = self.b2[cls];
                for k in 0..self.hidden {
                    acc += row[k] * hid[k];
                }
                out[cls] = acc;
            }
        }
        Ok(SegForward {
            logits: Logits::new(h, w, self.classes, logits)?,
            hidden,
            inputs,
        })
    }

    /// Accumulate parameter gradients from a logits gradient and, when the
    /// discriminator is in play, an extra gradient on the hidden layer.
    pub fn backward(
        &self,
        fwd: &SegForward,
        dlogits: &[f64],
        dhidden_extra: Option<&[f64]>,
        grads: &mut SegGrads,
    ) -> Result<()> {
        let px = fwd.logits.pixels();
        if dlogits.len() != px * self.classes {
            return Err(RptError::Length(format!(
                "dlogits length {} does not match {} pixels x {} classes",
                dlogits.len(),
                px,
                self.classes
            )));
        }
        if let Some(dh) = dhidden_extra {
            if dh.len() != px * self.hidden {
                return Err(RptError::Length(format!(
                    "dhidden length {} does not match {} pixels x {} units",
                    dh.len(),
                    px,
                    self.hidden
                )));
            }
        }
        let mut dhid = vec![0.0f64; self.hidden];
        for p in 0..px {
            let x = &fwd.inputs[p * SEG_INPUT_DIM..(p + 1) * SEG_INPUT_DIM];
            let hid = &fwd.hidden[p * self.hidden..(p + 1) * self.hidden];
            let dl = &dlogits[p * self.classes..(p + 1) * self.classes];
            for v in dhid.iter_mut() {
                *v = 0.0;
            }
            if let Some(dh) = dhidden_extra {
                dhid.copy_from_slice(&dh[p * self.hidden..(p + 1) * self.hidden]);
            }
            for cls in 0..self.classes {
                let d = dl[cls];
                if d != 0.0 {
                    grads.b2[cls] += d;
                    let wrow = &self.w2[cls * self.hidden..(cls + 1) * self.hidden];
                    let grow = &mut grads.w2[cls * self.hidden..(cls + 1) * self.hidden];
                    for k in 0..self.hidden {
                        grow[k] += d * hid[k];
                        dhid[k] += wrow[k] * d;
                    }
                }
            }
            for k in 0..self.hidden {
                let dpre = dhid[k] * (1.0 - hid[k] * hid[k]);
                if dpre != 0.0 {
                    grads.b1[k] += dpre;
                    let grow = &mut grads.w1[k * SEG_INPUT_DIM..(k + 1) * SEG_INPUT_DIM];
                    for j in 0..SEG_INPUT_DIM {
                        grow[j] += dpre * x[j];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sgd(&mut self, grads: &SegGrads, lr: f64) {
        for (w, g) in self.w1.iter_mut().zip(&grads.w1) {
            *w -= lr * g;
        }
        for (w, g) in self.b1.iter_mut().zip(&grads.b1) {
            *w -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            *w -= lr * g;
        }
        for (w, g) in self.b2.iter_mut().zip(&grads.b2) {
            *w -= lr * g;
        }
    }

    /// Write the head into a directory: a plain-text `model.txt` with the
    /// dimensions plus one tensor file per parameter block (f32 on disk).
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| RptError::io(dir, e))?;
        let index = format!("hidden {}\nclasses {}\n", self.hidden, self.classes);
        std::fs::write(dir.join("model.txt"), index).map_err(|e| RptError::io(dir, e))?;
        let blocks: [(&str, &[f64], Vec<u32>); 4] = [
            (
                "seg_w1",
                &self.w1,
                vec![self.hidden as u32, SEG_INPUT_DIM as u32],
            ),
            ("seg_b1", &self.b1, vec![self.hidden as u32]),
            (
                "seg_w2",
                &self.w2,
                vec![self.classes as u32, self.hidden as u32],
            ),
            ("seg_b2", &self.b2, vec![self.classes as u32]),
        ];
        for (name, data, dims) in blocks {
            let t =
                crate::tensor::Tensor::f32(dims, data.iter().map(|&v| v as f32).collect())?;
            t.write(&dir.join(format!("{name}.rptt")))?;
        }
        Ok(())
    }

    /// Load a head previously written by [`SegHead::save`].
    pub fn load(dir: &std::path::Path) -> Result<SegHead> {
        let index_path = dir.join("model.txt");
        let text =
            std::fs::read_to_string(&index_path).map_err(|e| RptError::io(&index_path, e))?;
        let mut hidden = None;
        let mut classes = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let value: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| RptError::Format(format!("bad model index line: {line}")))?;
            match key {
                "hidden" => hidden = Some(value),
                "classes" => classes = Some(value),
                other => {
                    return Err(RptError::Format(format!("unknown model index key: {other}")))
                }
            }
        }
        let hidden = hidden.ok_or_else(|| RptError::Format("model index missing hidden".into()))?;
        let classes =
            classes.ok_or_else(|| RptError::Format("model index missing classes".into()))?;
        if hidden == 0 || classes == 0 {
            return Err(RptError::Invalid("model dimensions must be nonzero".into()));
        }
        let mut head = SegHead::zeros(hidden, classes);
        let blocks: [(&str, &mut Vec<f64>, Vec<u32>); 4] = [
            (
                "seg_w1",
                &mut head.w1,
                vec![hidden as u32, SEG_INPUT_DIM as u32],
            ),
            ("seg_b1", &mut head.b1, vec![hidden as u32]),
            ("seg_w2", &mut head.w2, vec![classes as u32, hidden as u32]),
            ("seg_b2", &mut head.b2, vec![classes as u32]),
        ];
        for (name, slot, dims) in blocks {
            let path = dir.join(format!("{name}.rptt"));
            let t = crate::tensor::Tensor::read(&path)?;
            if t.dims != dims {
                return Err(RptError::Format(format!(
                    "{name} has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            let crate::tensor::TensorData::F32(data) = &t.data else {
                return Err(RptError::Format(format!("{name} is not an f32 tensor")));
            };
            *slot = data.iter().map(|&v| v as f64).collect();
        }
        Ok(head)
    }
}

/// Per-pixel logistic domain classifier over the hidden layer
/// (score `> 0` reads as "target domain").
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct DiscGrads {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Discriminator {
    pub fn zeros(hidden: usize) -> Discriminator {
        Discriminator {
            w: vec![0.0; hidden],
            b: 0.0,
        }
    }

    pub fn init_uniform<R: Rng>(hidden: usize, scale: f64, rng: &mut R) -> Discriminator {
        Discriminator {
            w: (0..hidden).map(|_| rng.gen_range(-scale..=scale)).collect(),
            b: rng.gen_range(-scale..=scale),
        }
    }

    pub fn grads(&self) -> DiscGrads {
        DiscGrads {
            w: vec![0.0; self.w.len()],
            b: 0.0,
        }
    }

    fn score(&self, hidden: &[f64]) -> f64 {
        let mut s = self.b;
        for (w, h) in self.w.iter().zip(hidden) {
            s += w * h;
        }
        s
    }

    pub fn sgd(&mut self, grads: &DiscGrads, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grads.w) {
            *w -= lr * g;
        }
        self.b -= lr * grads.b;
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adversarial loss over one target / source pair of hidden maps.
#[derive(Debug, Clone)]
pub struct AdvResult {
    /// `mean_tgt[-log D] + mean_src[-log(1 - D)]`.
    pub loss: f64,
    /// Discriminator parameter gradients (for its minimization step).
    pub d_grads: DiscGrads,
    /// Loss gradient w.r.t. target hidden activations.
    pub dhidden_tgt: Vec<f64>,
    /// Loss gradient w.r.t. source hidden activations.
    pub dhidden_src: Vec<f64>,
    /// Mean discriminator output on each side, for monitoring.
    pub mean_d_tgt: f64,
    pub mean_d_src: f64,
}

/// Cross-entropy of the discriminator on a target and a source hidden map.
///
/// Returned gradients are all of the *loss itself*: the discriminator steps
/// along `d_grads`, while the segmentation model steps along
/// `-weight * dhidden` to maximize the loss and blur the domains.
pub fn adv_loss(disc: &Discriminator, hidden_tgt: &[f64], hidden_src: &[f64]) -> Result<AdvResult> {
    let hn = disc.w.len();
    if hn == 0 || hidden_tgt.len() % hn != 0 || hidden_src.len() % hn != 0 {
        return Err(RptError::Invalid(
            "hidden maps do not match discriminator width".into(),
        ));
    }
    let n_tgt = hidden_tgt.len() / hn;
    let n_src = hidden_src.len() / hn;
    if n_tgt == 0 || n_src == 0 {
        return Err(RptError::Invalid("adversarial batch is empty".into()));
    }
    let mut out = AdvResult {
        loss: 0.0,
        d_grads: disc.grads(),
        dhidden_tgt: vec![0.0; hidden_tgt.len()],
        dhidden_src: vec![0.0; hidden_src.len()],
        mean_d_tgt: 0.0,
        mean_d_src: 0.0,
    };
    let inv_t = 1.0 / n_tgt as f64;
    for p in 0..n_tgt {
        let h = &hidden_tgt[p * hn..(p + 1) * hn];
        let s = disc.score(h);
        let d = sigmoid(s);
        out.loss += softplus(-s) * inv_t;
        out.mean_d_tgt += d * inv_t;
        let ds = (d - 1.0) * inv_t;
        out.d_grads.b += ds;
        for k in 0..hn {
            out.d_grads.w[k] += ds * h[k];
            out.dhidden_tgt[p * hn + k] = ds * disc.w[k];
        }
    }
    let inv_s = 1.0 / n_src as f64;
    for p in 0..n_src {
        let h = &hidden_src[p * hn..(p + 1) * hn];
        let s = disc.score(h);
        let d = sigmoid(s);
        out.loss += softplus(s) * inv_s;
        out.mean_d_src += d * inv_s;
        let ds = d * inv_s;
        out.d_grads.b += ds;
        for k in 0..hn {
            out.d_grads.w[k] += ds * h[k];
            out.dhidden_src[p * hn + k] = ds * disc.w[k];
        }
    }
    Ok(out)
}
