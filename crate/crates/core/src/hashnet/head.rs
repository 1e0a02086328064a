//! Two-layer head: `d -> hidden (ReLU) -> k (tanh)`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datastore::{write_f32s, write_header, write_u64, ByteReader};
use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

pub const MODEL_MAGIC: [u8; 4] = *b"UHSW";

/// Head weights. `w1` is `hidden x d`, `w2` is `k x hidden`. The same
/// struct carries gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct HashHeadParams {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl HashHeadParams {
    pub fn zeros(d: usize, hidden: usize, k: usize) -> Self {
        HashHeadParams {
            w1: DenseMatrix::zeros(hidden, d),
            b1: vec![0.0; hidden],
            w2: DenseMatrix::zeros(k, hidden),
            b2: vec![0.0; k],
        }
    }

    pub fn zeros_like(&self) -> Self {
        HashHeadParams::zeros(self.d(), self.hidden(), self.k())
    }

    pub fn d(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn k(&self) -> usize {
        self.w2.rows()
    }

    /// Parameter blocks in layer order.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Xavier-uniform weights, zero biases, from a seeded ChaCha8 stream.
pub fn init_params(d: usize, hidden: usize, k: usize, seed: u64) -> HashHeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = HashHeadParams::zeros(d, hidden, k);
    let b1 = (6.0 / (d + hidden) as f64).sqrt();
    for w in p.w1.as_mut_slice() {
        *w = rng.random_range(-b1..b1);
    }
    let b2 = (6.0 / (hidden + k) as f64).sqrt();
    for w in p.w2.as_mut_slice() {
        *w = rng.random_range(-b2..b2);
    }
    p
}

/// Intermediate activations kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden_pre: DenseMatrix,
    pub hidden: DenseMatrix,
    pub z: DenseMatrix,
}

fn check_input(p: &HashHeadParams, x: &DenseMatrix) -> Result<()> {
    if x.cols() != p.d() {
        return Err(Error::Shape(format!(
            "input has {} features, head expects {}",
            x.cols(),
            p.d()
        )));
    }
    Ok(())
}

pub fn forward_trace(p: &HashHeadParams, x: &DenseMatrix) -> Result<ForwardTrace> {
    check_input(p, x)?;
    let t = x.rows();
    let mut hidden_pre = DenseMatrix::zeros(t, p.hidden());
    let mut hidden = DenseMatrix::zeros(t, p.hidden());
    let mut z = DenseMatrix::zeros(t, p.k());
    for s in 0..t {
        let xs = x.row(s);
        let pre = hidden_pre.row_mut(s);
        for (h, v) in pre.iter_mut().enumerate() {
            *v = dot(p.w1.row(h), xs) + p.b1[h];
        }
        let act = hidden.row_mut(s);
        for (a, &v) in act.iter_mut().zip(hidden_pre.row(s)) {
            *a = v.max(0.0);
        }
        let out = z.row_mut(s);
        for (j, v) in out.iter_mut().enumerate() {
            *v = (dot(p.w2.row(j), hidden.row(s)) + p.b2[j]).tanh();
        }
    }
    Ok(ForwardTrace {
        hidden_pre,
        hidden,
        z,
    })
}

/// Relaxed codes in `(-1, 1)^k`, one row per input row.
pub fn forward(p: &HashHeadParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_trace(p, x)?.z)
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn backward_from_trace(
    p: &HashHeadParams,
    x: &DenseMatrix,
    trace: &ForwardTrace,
    dz: &DenseMatrix,
) -> Result<HashHeadParams> {
    if dz.rows() != x.rows() || dz.cols() != p.k() {
        return Err(Error::Shape(format!(
            "code gradient is {}x{}, expected {}x{}",
            dz.rows(),
            dz.cols(),
            x.rows(),
            p.k()
        )));
    }
    let mut g = p.zeros_like();
    let mut d_out = vec![0.0; p.k()];
    let mut d_hidden = vec![0.0; p.hidden()];
    for s in 0..x.rows() {
        for (j, d) in d_out.iter_mut().enumerate() {
            let zj = trace.z.get(s, j);
            *d = dz.get(s, j) * (1.0 - zj * zj);
        }
        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        for (j, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, trace.hidden.row(s), g.w2.row_mut(j));
            g.b2[j] += d;
            axpy(d, p.w2.row(j), &mut d_hidden);
        }
        for (h, &d) in d_hidden.iter().enumerate() {
            if trace.hidden_pre.get(s, h) <= 0.0 {
                continue;
            }
            axpy(d, x.row(s), g.w1.row_mut(h));
            g.b1[h] += d;
        }
    }
    Ok(g)
}

/// Parameter gradients given the gradient of the loss w.r.t. the codes.
pub fn backward(p: &HashHeadParams, x: &DenseMatrix, dz: &DenseMatrix) -> Result<HashHeadParams> {
    let trace = forward_trace(p, x)?;
    backward_from_trace(p, x, &trace, dz)
}

/// Writes a `UHSW` model file: header, `d`, `hidden`, `k`, then
/// `w1`, `b1`, `w2`, `b2` as `f32`.
pub fn write_model(path: impl AsRef<Path>, p: &HashHeadParams) -> Result<()> {
    if p.blocks()
        .iter()
        .any(|b| b.iter().any(|v| !(*v as f32).is_finite()))
    {
        return Err(Error::InvalidData("model has non-finite weights".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, MODEL_MAGIC)?;
    write_u64(&mut w, p.d())?;
    write_u64(&mut w, p.hidden())?;
    write_u64(&mut w, p.k())?;
    for block in p.blocks() {
        write_f32s(&mut w, block)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<HashHeadParams> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.header(MODEL_MAGIC)?;
    let d = r.usize("input dimension")?;
    let hidden = r.usize("hidden width")?;
    let k = r.usize("code length")?;
    if d == 0 || hidden == 0 || k == 0 {
        return Err(Error::Format(format!(
            "degenerate model dims {d}x{hidden}x{k}"
        )));
    }
    let mut p = HashHeadParams::zeros(d, hidden, k);
    let sizes = [hidden * d, hidden, k * hidden, k];
    for (block, size) in p.blocks_mut().into_iter().zip(sizes) {
        let values = r.f32s(size, "model weights")?;
        block.copy_from_slice(&values);
    }
    r.finish()?;
    if !p.all_finite() {
        return Err(Error::InvalidData("model has non-finite weights".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn input(t: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        DenseMatrix::from_vec(t, d, v).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(4096, 1024, 64, 11);
        let b = init_params(4096, 1024, 64, 11);
        assert_eq!(a, b);
        let bound = (6.0f64 / 5120.0).sqrt();
        assert!(a.w1.as_slice().iter().all(|w| w.abs() <= bound));
        let bound2 = (6.0f64 / 1088.0).sqrt();
        assert!(a.w2.as_slice().iter().all(|w| w.abs() <= bound2));
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        assert_ne!(init_params(16, 8, 4, 1), init_params(16, 8, 4, 2));
    }

    #[test]
    fn zero_params_give_zero_codes() {
        let p = HashHeadParams::zeros(5, 3, 4);
        let z = forward(&p, &input(3, 5, 0)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codes_are_strictly_inside_unit_box() {
        let p = init_params(6, 10, 8, 3);
        let x = input(20, 6, 4);
        let z = forward(&p, &x).unwrap();
        assert!(z.as_slice().iter().all(|v| v.abs() < 1.0));
        assert_eq!(z, forward(&p, &x).unwrap());
        assert!(forward(&p, &input(2, 5, 0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = sum(c .* Z) for a fixed random c, so dL/dZ = c
        let p = init_params(5, 7, 3, 21);
        let x = input(4, 5, 22);
        let c = input(4, 3, 23);
        let objective = |p: &HashHeadParams| -> f64 {
            let z = forward(p, &x).unwrap();
            z.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = backward(&p, &x, &c).unwrap();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        let mut max_g: f64 = 0.0;
        for b in 0..4 {
            for i in 0..p.blocks()[b].len() {
                let mut plus = p.clone();
                plus.blocks_mut()[b][i] += h;
                let mut minus = p.clone();
                minus.blocks_mut()[b][i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.blocks()[b][i];
                max_err = max_err.max((fd - an).abs());
                max_g = max_g.max(an.abs()).max(fd.abs());
            }
        }
        assert!(max_err / max_g < 1e-6, "{max_err} / {max_g}");
    }

    #[test]
    fn model_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.uhsw");
        let p = init_params(3, 4, 5, 9);
        write_model(&path, &p).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!((back.d(), back.hidden(), back.k()), (3, 4, 5));
        for (a, b) in p.blocks().iter().zip(back.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 24 + 4 * (12 + 4 + 20 + 5));
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Truncated { .. })));
    }
}
