//! Two-layer perceptron with a ReLU hidden layer and a hand-written reverse
//! pass.

use rand::Rng;

/// Parameters live in one buffer laid out as
/// `[w1 (hidden×in, row-major), b1, w2 (out×hidden, row-major), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Maximum supported hidden width.
    pub const MAX_HIDDEN: usize = 64;

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        assert!(n_hidden <= Self::MAX_HIDDEN, "hidden width {n_hidden} exceeds {}", Self::MAX_HIDDEN);
        Mlp {
            n_in,
            n_hidden,
            n_out,
            params: vec![0.0; Self::param_count_for(n_in, n_hidden, n_out)],
        }
    }

    pub fn param_count_for(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Hidden layer: `U(±1/√in)` weights and biases. Output layer: weights
    /// `U(±out_scale/√hidden)`, zero biases.
    pub fn init<R: Rng>(&mut self, out_scale: f64, rng: &mut R) {
        let b1 = 1.0 / (self.n_in as f64).sqrt();
        let b2 = out_scale / (self.n_hidden as f64).sqrt();
        let (_, b1_end, w2_end) = self.offsets();
        for v in &mut self.params[..b1_end] {
            *v = rng.gen_range(-b1..b1);
        }
        for v in &mut self.params[b1_end..w2_end] {
            *v = rng.gen_range(-b2..b2);
        }
        for v in &mut self.params[w2_end..] {
            *v = 0.0;
        }
    }

    /// End offsets of `w1`, `b1`, `w2` in `params`.
    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.n_hidden * self.n_in;
        let b1 = w1 + self.n_hidden;
        let w2 = b1 + self.n_out * self.n_hidden;
        (w1, b1, w2)
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.n_hidden * self.n_in]
    }

    pub fn b1(&self) -> &[f64] {
        let (w1, b1, _) = self.offsets();
        &self.params[w1..b1]
    }

    pub fn w2(&self) -> &[f64] {
        let (_, b1, w2) = self.offsets();
        &self.params[b1..w2]
    }

    pub fn b2(&self) -> &[f64] {
        let (_, _, w2) = self.offsets();
        &self.params[w2..]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let (_, _, w2) = self.offsets();
        &mut self.params[w2..]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Writes post-ReLU activations into `hidden` and raw outputs into `out`.
    pub fn forward(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        let (w1_end, b1_end, w2_end) = self.offsets();
        let (w1, b1) = (&self.params[..w1_end], &self.params[w1_end..b1_end]);
        let (w2, b2) = (&self.params[b1_end..w2_end], &self.params[w2_end..]);
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &w1[j * self.n_in..(j + 1) * self.n_in];
            let mut acc = b1[j];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *h = acc.max(0.0);
        }
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w2[o * self.n_hidden..(o + 1) * self.n_hidden];
            let mut acc = b2[o];
            for (w, h) in row.iter().zip(hidden.iter()) {
                acc += w * h;
            }
            *y = acc;
        }
    }

    /// Accumulates parameter gradients into `grad` (same layout as `params`)
    /// and input gradients into `d_x`. `hidden` must come from the matching
    /// forward call.
    pub fn backward(
        &self,
        x: &[f64],
        hidden: &[f64],
        d_out: &[f64],
        grad: &mut [f64],
        d_x: &mut [f64],
    ) {
        let (w1_end, b1_end, w2_end) = self.offsets();
        let w1 = &self.params[..w1_end];
        let w2 = &self.params[b1_end..w2_end];
        let mut d_hidden = [0.0f64; Self::MAX_HIDDEN];
        let d_hidden = &mut d_hidden[..self.n_hidden];
        {
            let (g_head, g_b2) = grad.split_at_mut(w2_end);
            let g_w2 = &mut g_head[b1_end..];
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g_b2[o] += d;
                let row = &w2[o * self.n_hidden..(o + 1) * self.n_hidden];
                let g_row = &mut g_w2[o * self.n_hidden..(o + 1) * self.n_hidden];
                for j in 0..self.n_hidden {
                    g_row[j] += d * hidden[j];
                    d_hidden[j] += d * row[j];
                }
            }
        }
        let (g_w1, rest) = grad.split_at_mut(w1_end);
        let g_b1 = &mut rest[..self.n_hidden];
        for j in 0..self.n_hidden {
            // ReLU: gradient passes only where the unit was active.
            if hidden[j] <= 0.0 {
                continue;
            }
            let d = d_hidden[j];
            if d == 0.0 {
                continue;
            }
            g_b1[j] += d;
            let row = &w1[j * self.n_in..(j + 1) * self.n_in];
            let g_row = &mut g_w1[j * self.n_in..(j + 1) * self.n_in];
            for i in 0..self.n_in {
                g_row[i] += d * x[i];
                d_x[i] += d * row[i];
            }
        }
    }
}
