//! LSTM cell with optional persona input.
//!
//! Pre-activations are `W·[h_prev; x] + b (+ W_v·v)`, split into four
//! blocks of `H` rows in the order forget, input, output, candidate.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Matrix};

/// Borrowed weights of one cell. `w` is `4H × (H + X)`, `b` is `4H × 1`,
/// `wv` (when present) is `4H × P`.
#[derive(Clone, Copy)]
pub(crate) struct CellWeights<'a> {
    pub w: &'a Matrix,
    pub b: &'a Matrix,
    pub wv: Option<&'a Matrix>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct CellCache {
    /// `[h_prev; x]`, with `x` already masked by dropout.
    pub z: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `[f, i, o, j]`.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

pub(crate) struct CellGrads<'a> {
    pub w: &'a mut Matrix,
    pub b: &'a mut Matrix,
    pub wv: Option<&'a mut Matrix>,
}

impl CellWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.b.rows() / 4
    }

    pub fn forward(&self, h_prev: &[f64], c_prev: &[f64], x: &[f64], v: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, CellCache) {
        let hs = self.hidden();
        let mut z = Vec::with_capacity(h_prev.len() + x.len());
        z.extend_from_slice(h_prev);
        z.extend_from_slice(x);
        let mut a = vec![0.0; 4 * hs];
        self.w.matvec_acc(&z, &mut a);
        for (ai, bi) in a.iter_mut().zip(self.b.data()) {
            *ai += bi;
        }
        if let (Some(wv), Some(v)) = (self.wv, v) {
            let mut pv = vec![0.0; 4 * hs];
            wv.matvec_acc(v, &mut pv);
            for (ai, p) in a.iter_mut().zip(&pv) {
                *ai += p;
            }
        }
        for (k, ai) in a.iter_mut().enumerate() {
            *ai = if k < 3 * hs { sigmoid_scalar(*ai) } else { ai.tanh() };
        }
        let (f, rest) = a.split_at(hs);
        let (i, rest) = rest.split_at(hs);
        let (o, j) = rest.split_at(hs);
        let mut c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        let mut tanh_c = vec![0.0; hs];
        for k in 0..hs {
            c[k] = f[k] * c_prev[k] + i[k] * j[k];
            tanh_c[k] = c[k].tanh();
            h[k] = o[k] * tanh_c[k];
        }
        let cache = CellCache {
            z,
            c_prev: c_prev.to_vec(),
            gates: a,
            tanh_c,
        };
        (h, c, cache)
    }

    /// Given `dh` and `dc` flowing into this cell's outputs, accumulates
    /// weight grads and returns `(dh_prev, dc_prev, dx)`. When persona is
    /// active, `dv` receives `W_vᵀ · da`.
    pub fn backward(
        &self,
        cache: &CellCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut CellGrads<'_>,
        v: Option<&[f64]>,
        dv: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden();
        let g = &cache.gates;
        let mut da = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for k in 0..hs {
            let (f, i, o, j) = (g[k], g[hs + k], g[2 * hs + k], g[3 * hs + k]);
            let tc = cache.tanh_c[k];
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let d_o = dh[k] * tc;
            let d_f = dck * cache.c_prev[k];
            let d_i = dck * j;
            let d_j = dck * i;
            dc_prev[k] = dck * f;
            da[k] = d_f * f * (1.0 - f);
            da[hs + k] = d_i * i * (1.0 - i);
            da[2 * hs + k] = d_o * o * (1.0 - o);
            da[3 * hs + k] = d_j * (1.0 - j * j);
        }
        grads.w.add_outer(&da, &cache.z);
        for (gb, d) in grads.b.data_mut().iter_mut().zip(&da) {
            *gb += d;
        }
        if let (Some(wv), Some(gwv), Some(v)) = (self.wv, grads.wv.as_deref_mut(), v) {
            gwv.add_outer(&da, v);
            if let Some(dv) = dv {
                wv.tmatvec_acc(&da, dv);
            }
        }
        let mut dz = vec![0.0; cache.z.len()];
        self.w.tmatvec_acc(&da, &mut dz);
        let dx = dz.split_off(hs);
        (dz, dc_prev, dx)
    }
}

fn check_cell(w: &Matrix, b: &Matrix, h_prev: &[f64], c_prev: &[f64], x: &[f64], extra: usize) -> Result<usize> {
    let hs = h_prev.len();
    if b.shape() != (4 * hs, 1) || c_prev.len() != hs {
        return Err(Error::Dimension(format!(
            "bias {:?} / cell state {} incompatible with hidden size {hs}",
            b.shape(),
            c_prev.len()
        )));
    }
    let want = hs + x.len() + extra;
    if w.shape() != (4 * hs, want) {
        return Err(Error::Dimension(format!(
            "gate matrix is {}x{}, expected {}x{want}",
            w.rows(),
            w.cols(),
            4 * hs
        )));
    }
    Ok(hs)
}

/// Standard LSTM step: `W` maps `[h_prev; x]` to `4H` pre-activations.
/// Returns `(h, c)`.
pub fn lstm_cell_standard(w: &Matrix, b: &Matrix, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_cell(w, b, h_prev, c_prev, x, 0)?;
    let cell = CellWeights { w, b, wv: None };
    let (h, c, _) = cell.forward(h_prev, c_prev, x, None);
    Ok((h, c))
}

/// Persona-conditioned LSTM step: `W` maps `[h_prev; x; v]` to `4H`
/// pre-activations.
pub fn lstm_cell_persona(
    w: &Matrix,
    b: &Matrix,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hs = check_cell(w, b, h_prev, c_prev, x, v.len())?;
    let split = hs + x.len();
    let (mut base, mut persona) = (Vec::new(), Vec::new());
    for r in 0..w.rows() {
        let row = w.row(r);
        base.extend_from_slice(&row[..split]);
        persona.extend_from_slice(&row[split..]);
    }
    let base = Matrix::new(w.rows(), split, base)?;
    let persona = Matrix::new(w.rows(), v.len(), persona)?;
    let cell = CellWeights {
        w: &base,
        b,
        wv: Some(&persona),
    };
    let (h, c, _) = cell.forward(h_prev, c_prev, x, Some(v));
    Ok((h, c))
}
