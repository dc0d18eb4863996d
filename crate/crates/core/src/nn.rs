//! Layer building blocks on top of [`crate::autograd`].

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Float, Graph, ParamId, ParamSet, Var};

/// Lengths of the variable-length sequences packed row-wise into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { lens, offsets }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(offset, len)` per segment.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().copied().zip(self.lens.iter().copied())
    }

    /// Segment index of every packed row.
    pub fn row_owner(&self) -> Vec<usize> {
        self.lens
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
            .collect()
    }
}

/// Registers parameters under a dotted name prefix with deterministic initialization.
///
/// Values are drawn in `f64` and cast, so an `f32` and an `f64` model built from the
/// same seed hold the same numbers up to rounding.
pub struct ParamBuilder<'a, T: Float> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
            group: "main".into(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
            group: self.group.clone(),
        }
    }

    pub fn with_group(mut self, group: &str) -> Self {
        self.group = group.to_string();
        self
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        let full = self.full(name);
        let v = value.mapv(T::of);
        self.params.add(full, &self.group, v)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let v = Array2::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-bound..bound));
        self.add(name, v)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let v = Array2::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.add(name, v)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize, bias: bool) -> Self {
        let w = pb.xavier("w", din, dout);
        let b = bias.then(|| pb.zeros("b", 1, dout));
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        Self {
            gain: pb.ones("gain", 1, d),
            bias: pb.zeros("bias", 1, d),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// 1-D convolution along the row (time) axis of packed sequences.
///
/// Taps never cross a segment boundary; positions outside a segment read zeros.
/// Output position `t` is centred on input position `t * stride`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        din: usize,
        dout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Self {
            w: pb.xavier("w", kernel * din, dout),
            b: pb.zeros("b", 1, dout),
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> (Var, Segments) {
        let left = (self.kernel - 1) / 2;
        let out_lens: Vec<usize> = segs.lens().iter().map(|&l| self.out_len(l)).collect();
        let out_total: usize = out_lens.iter().sum();
        let mut taps = Vec::with_capacity(self.kernel);
        for k in 0..self.kernel {
            let mut idx = Vec::with_capacity(out_total);
            for (off, len) in segs.iter() {
                for t in 0..self.out_len(len) {
                    let pos = (t * self.stride + k) as isize - left as isize;
                    idx.push((pos >= 0 && (pos as usize) < len).then(|| off + pos as usize));
                }
            }
            taps.push(idx);
        }
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            let parts: Vec<Var> = taps.iter().map(|idx| g.gather_rows(x, idx)).collect();
            g.concat_cols(&parts)
        };
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(cols, w);
        (g.add_row(y, b), Segments::new(out_lens))
    }
}

/// Single-layer unidirectional GRU (PyTorch gate layout: reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, din: usize, hidden: usize) -> Self {
        Self {
            w_ih: pb.xavier("w_ih", din, 3 * hidden),
            w_hh: pb.xavier("w_hh", hidden, 3 * hidden),
            b_ih: pb.zeros("b_ih", 1, 3 * hidden),
            b_hh: pb.zeros("b_hh", 1, 3 * hidden),
            hidden,
        }
    }

    /// Final hidden state of every segment, `[segments × hidden]`, starting from h = 0.
    /// Every segment must be non-empty.
    pub fn final_states<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> Var {
        assert!(segs.lens().iter().all(|&l| l > 0), "GRU over an empty sequence");
        let h = self.hidden;
        let n = segs.count();
        let w_ih = g.param(self.w_ih);
        let b_ih = g.param(self.b_ih);
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let gi = g.matmul(x, w_ih);
        let gi = g.add_row(gi, b_ih);

        // Longest sequences first so the active set is always a row prefix.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(segs.lens()[i]));
        let max_len = segs.lens()[order[0]];

        let mut state = g.zeros(n, h);
        for t in 0..max_len {
            let active = order.iter().take_while(|&&i| segs.lens()[i] > t).count();
            let rows: Vec<usize> = order[..active].iter().map(|&i| segs.offset(i) + t).collect();
            let xt = g.select_rows(gi, &rows);
            let prev = if active == n { state } else { g.slice_rows(state, 0, active) };
            let gh = g.matmul(prev, w_hh);
            let gh = g.add_row(gh, b_hh);

            let xr = g.slice_cols(xt, 0, h);
            let xz = g.slice_cols(xt, h, h);
            let xn = g.slice_cols(xt, 2 * h, h);
            let hr = g.slice_cols(gh, 0, h);
            let hz = g.slice_cols(gh, h, h);
            let hn = g.slice_cols(gh, 2 * h, h);

            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let rh = g.mul(r, hn);
            let nn = g.add(xn, rh);
            let nn = g.tanh(nn);
            // h' = n + z ⊙ (h − n)
            let diff = g.sub(prev, nn);
            let zd = g.mul(z, diff);
            let next = g.add(nn, zd);

            state = if active == n {
                next
            } else {
                let rest = g.slice_rows(state, active, n - active);
                g.concat_rows(&[next, rest])
            };
        }
        let mut back = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            back[i] = pos;
        }
        g.select_rows(state, &back)
    }
}

/// Broadcasts one row per segment over that segment's packed rows.
pub fn broadcast_segments<T: Float>(g: &mut Graph<'_, T>, per_segment: Var, segs: &Segments) -> Var {
    let owner = segs.row_owner();
    g.select_rows(per_segment, &owner)
}
