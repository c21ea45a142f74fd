//! A from-scratch LSTM cell and a dense projection layer, both in f64 with
//! exact analytic gradients (verified against finite differences in tests).
//!
//! Gate layout: the weight matrix has `4 * hidden` rows over the
//! concatenated `[input, hidden_prev]` vector, in block order
//! input gate `i`, forget gate `f`, candidate `g`, output gate `o`:
//!
//! ```text
//! i = sigmoid(W_i [x; h] + b_i)      c' = f * c + i * g
//! f = sigmoid(W_f [x; h] + b_f)      h' = o * tanh(c')
//! g = tanh   (W_g [x; h] + b_g)
//! o = sigmoid(W_o [x; h] + b_o)
//! ```
//!
//! With all parameters at zero the cell state stays at zero and the hidden
//! output is exactly zero, so a zero projection yields a uniform posterior.

use rand::Rng;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// LSTM parameters: `w` is `4*hidden` rows by `input + hidden` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradient accumulator with the same shapes as [`LstmCell`].
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates, blocks of `hidden`: i, f, g, o.
    gates: Vec<f64>,
    c: Vec<f64>,
}

/// Forward trace over a sequence: hidden states per step plus step caches.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub hs: Vec<Vec<f64>>,
    pub steps: Vec<LstmStep>,
    pub h_final: Vec<f64>,
    pub c_final: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> LstmCell {
        LstmCell {
            input,
            hidden,
            w: vec![0.0; 4 * hidden * (input + hidden)],
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn init_uniform<R: Rng>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> LstmCell {
        let mut cell = LstmCell::zeros(input, hidden);
        for w in cell.w.iter_mut() {
            *w = rng.gen_range(-scale..=scale);
        }
        for b in cell.b.iter_mut() {
            *b = rng.gen_range(-scale..=scale);
        }
        cell
    }

    pub fn grads(&self) -> LstmGrads {
        LstmGrads {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    /// One step; returns the new hidden/cell state and the backward cache.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmStep) {
        let hn = self.hidden;
        let cols = self.input + hn;
        debug_assert_eq!(x.len(), self.input);
        debug_assert_eq!(h_prev.len(), hn);
        let mut pre = self.b.clone();
        for (row, p) in pre.iter_mut().enumerate() {
            let wrow = &self.w[row * cols..(row + 1) * cols];
            let mut acc = 0.0;
            for (j, &xv) in x.iter().enumerate() {
                acc += wrow[j] * xv;
            }
            for (j, &hv) in h_prev.iter().enumerate() {
                acc += wrow[self.input + j] * hv;
            }
            *p += acc;
        }
        let mut gates = vec![0.0; 4 * hn];
        for k in 0..hn {
            gates[k] = sigmoid(pre[k]);
            gates[hn + k] = sigmoid(pre[hn + k]);
            gates[2 * hn + k] = pre[2 * hn + k].tanh();
            gates[3 * hn + k] = sigmoid(pre[3 * hn + k]);
        }
        let mut c = vec![0.0; hn];
        let mut h = vec![0.0; hn];
        for k in 0..hn {
            c[k] = gates[hn + k] * c_prev[k] + gates[k] * gates[2 * hn + k];
            h[k] = gates[3 * hn + k] * c[k].tanh();
        }
        let cache = LstmStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            c: c.clone(),
        };
        (h, c, cache)
    }

    /// Run the whole sequence from `(h0, c0)`.
    pub fn forward(&self, xs: &[Vec<f64>], h0: &[f64], c0: &[f64]) -> LstmTrace {
        let mut h = h0.to_vec();
        let mut c = c0.to_vec();
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (nh, nc, cache) = self.step(x, &h, &c);
            h = nh;
            c = nc;
            hs.push(h.clone());
            steps.push(cache);
        }
        LstmTrace {
            hs,
            steps,
            h_final: h,
            c_final: c,
        }
    }

    /// One backward step. `dh`/`dc` are gradients flowing into this step's
    /// outputs; returns gradients for the previous step's `(h, c)` and
    /// accumulates parameter gradients.
    fn step_backward(
        &self,
        cache: &LstmStep,
        dh: &[f64],
        dc_in: &[f64],
        grads: &mut LstmGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let hn = self.hidden;
        let cols = self.input + hn;
        let mut da = vec![0.0; 4 * hn];
        let mut dc_prev = vec![0.0; hn];
        for k in 0..hn {
            let i = cache.gates[k];
            let f = cache.gates[hn + k];
            let g = cache.gates[2 * hn + k];
            let o = cache.gates[3 * hn + k];
            let tc = cache.c[k].tanh();
            let d_o = dh[k] * tc;
            let dc = dc_in[k] + dh[k] * o * (1.0 - tc * tc);
            let d_f = dc * cache.c_prev[k];
            let d_i = dc * g;
            let d_g = dc * i;
            da[k] = d_i * i * (1.0 - i);
            da[hn + k] = d_f * f * (1.0 - f);
            da[2 * hn + k] = d_g * (1.0 - g * g);
            da[3 * hn + k] = d_o * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
        let mut dh_prev = vec![0.0; hn];
        for (row, &d) in da.iter().enumerate() {
            grads.b[row] += d;
            let wrow = &self.w[row * cols..(row + 1) * cols];
            let grow = &mut grads.w[row * cols..(row + 1) * cols];
            for (j, &xv) in cache.x.iter().enumerate() {
                grow[j] += d * xv;
            }
            for j in 0..hn {
                grow[self.input + j] += d * cache.h_prev[j];
                dh_prev[j] += wrow[self.input + j] * d;
            }
        }
        (dh_prev, dc_prev)
    }

    /// Backpropagation through time. `dhs[t]` is the gradient w.r.t. the
    /// hidden output of step `t` (from per-step heads); `dh_final`/`dc_final`
    /// flow into the last state (from a downstream consumer). Returns the
    /// gradients w.r.t. the initial `(h0, c0)`.
    pub fn backward(
        &self,
        trace: &LstmTrace,
        dhs: Option<&[Vec<f64>]>,
        dh_final: &[f64],
        dc_final: &[f64],
        grads: &mut LstmGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let hn = self.hidden;
        let mut dh = dh_final.to_vec();
        let mut dc = dc_final.to_vec();
        for t in (0..trace.steps.len()).rev() {
            if let Some(dhs) = dhs {
                for k in 0..hn {
                    dh[k] += dhs[t][k];
                }
            }
            let (ph, pc) = self.step_backward(&trace.steps[t], &dh, &dc, grads);
            dh = ph;
            dc = pc;
        }
        (dh, dc)
    }

    /// Plain SGD update.
    pub fn sgd(&mut self, grads: &LstmGrads, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grads.w) {
            *w -= lr * g;
        }
        for (b, g) in self.b.iter_mut().zip(&grads.b) {
            *b -= lr * g;
        }
    }
}

/// Dense layer `y = W x + b`, used to project hidden states to class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear {
            input,
            output,
            w: vec![0.0; output * input],
            b: vec![0.0; output],
        }
    }

    pub fn init_uniform<R: Rng>(input: usize, output: usize, scale: f64, rng: &mut R) -> Linear {
        let mut l = Linear::zeros(input, output);
        for w in l.w.iter_mut() {
            *w = rng.gen_range(-scale..=scale);
        }
        for b in l.b.iter_mut() {
            *b = rng.gen_range(-scale..=scale);
        }
        l
    }

    pub fn grads(&self) -> LinearGrads {
        LinearGrads {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (row, yv) in y.iter_mut().enumerate() {
            let wrow = &self.w[row * self.input..(row + 1) * self.input];
            for (j, &xv) in x.iter().enumerate() {
                *yv += wrow[j] * xv;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut LinearGrads) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        for (row, &d) in dy.iter().enumerate() {
            grads.b[row] += d;
            let wrow = &self.w[row * self.input..(row + 1) * self.input];
            let grow = &mut grads.w[row * self.input..(row + 1) * self.input];
            for j in 0..self.input {
                grow[j] += d * x[j];
                dx[j] += wrow[j] * d;
            }
        }
        dx
    }

    pub fn sgd(&mut self, grads: &LinearGrads, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grads.w) {
            *w -= lr * g;
        }
        for (b, g) in self.b.iter_mut().zip(&grads.b) {
            *b -= lr * g;
        }
    }
}

/// Numerically stable softmax of a score vector.
pub fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
