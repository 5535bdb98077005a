use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Residual below which [`FactoredLayer::semi_orth_step`] leaves `B` untouched.
pub const SEMI_ORTH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shape of one factored layer, without weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    /// Width of the previous layer's output, before splicing.
    pub in_dim: usize,
    pub bottleneck: usize,
    pub activation: Activation,
    #[serde(default)]
    pub context: Vec<i32>,
}

impl LayerSpec {
    pub fn spliced_in_dim(&self) -> usize {
        self.in_dim * self.context.len().max(1)
    }

    pub fn param_count(&self) -> usize {
        self.bottleneck * (self.out_dim + self.spliced_in_dim())
    }
}

/// A weight matrix stored as the product `W = A·B`, with `A` of shape
/// `out × r` and `B` of shape `r × in`. `B` is kept close to semi-orthogonal
/// (`B·Bᵀ ≈ I_r`). When `context` is non-empty the layer input at frame `t`
/// is the concatenation of the previous layer's frames `t + o` for each
/// offset `o`, clamped to the segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredLayer {
    a: Tensor,
    b: Tensor,
    activation: Activation,
    context: Vec<i32>,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Tensor,
    pub mid: Tensor,
    pub pre: Tensor,
    pub out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub a: Tensor,
    pub b: Tensor,
}

impl FactoredLayer {
    pub fn new(a: Tensor, b: Tensor, activation: Activation, context: Vec<i32>) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::dim("factors must be matrices"));
        }
        let (out, r) = (a.rows(), a.cols());
        let (r2, inp) = (b.rows(), b.cols());
        if r != r2 {
            return Err(Error::dim(format!("A is {out}x{r} but B is {r2}x{inp}")));
        }
        let ctx = context.len().max(1);
        if inp % ctx != 0 {
            return Err(Error::dim(format!(
                "B has {inp} columns, not a multiple of {ctx} context offsets"
            )));
        }
        if r > out.min(inp) {
            return Err(Error::dim(format!("bottleneck {r} exceeds min(out {out}, in {inp})")));
        }
        Ok(FactoredLayer {
            a,
            b,
            activation,
            context,
        })
    }

    /// Scaled-uniform initialisation followed by semi-orthogonalisation of `B`.
    pub fn init(spec: &LayerSpec, rng: &mut Rng) -> Result<Self> {
        let inp = spec.spliced_in_dim();
        let (out, r) = (spec.out_dim, spec.bottleneck);
        if out == 0 || inp == 0 || r == 0 {
            return Err(Error::dim(format!("empty layer {spec:?}")));
        }
        let mut draw = |rows: usize, cols: usize| {
            let lim = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform_range(-lim, lim)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let a = draw(out, r)?;
        let b = draw(r, inp)?;
        let mut layer = FactoredLayer::new(a, b, spec.activation, spec.context.clone())?;
        for _ in 0..100 {
            if layer.semi_orth_residual() <= SEMI_ORTH_TOL {
                break;
            }
            layer.semi_orth_step()?;
        }
        Ok(layer)
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn context(&self) -> &[i32] {
        &self.context
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.a.cols()
    }

    /// Input width after splicing (columns of `B`).
    pub fn spliced_in_dim(&self) -> usize {
        self.b.cols()
    }

    /// Width of the previous layer's output.
    pub fn in_dim(&self) -> usize {
        self.b.cols() / self.context.len().max(1)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            out_dim: self.out_dim(),
            in_dim: self.in_dim(),
            bottleneck: self.bottleneck(),
            activation: self.activation,
            context: self.context.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Effective weight `A·B`.
    pub fn weight(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)
    }

    /// Same layer with new factors of identical shape.
    pub fn with_factors(&self, a: Tensor, b: Tensor) -> Result<Self> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::dim("replacement factors change the layer shape"));
        }
        Ok(FactoredLayer {
            a,
            b,
            activation: self.activation,
            context: self.context.clone(),
        })
    }

    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    /// Parameters of this layer, `A` then `B`, row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.a.data());
        v.extend_from_slice(self.b.data());
        v
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::dim(format!(
                "layer has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer parameters".into()));
        }
        let na = self.a.len();
        self.a.data_mut().copy_from_slice(&p[..na]);
        self.b.data_mut().copy_from_slice(&p[na..]);
        Ok(())
    }

    /// `‖B·Bᵀ − I‖_F`.
    pub fn semi_orth_residual(&self) -> f64 {
        semi_orth_residual(&self.b)
    }

    /// One step of iterative semi-orthogonalisation of `B`:
    /// `B ← B − c·(B·Bᵀ − I)·B` with `c = min(½, 2/λ̂)`, where `λ̂` is a
    /// Gershgorin bound on the largest eigenvalue of `B·Bᵀ`. The step size
    /// guarantees every singular value moves strictly closer to one.
    pub fn semi_orth_step(&mut self) -> Result<()> {
        if self.semi_orth_residual() <= SEMI_ORTH_TOL {
            return Ok(());
        }
        let r = self.b.rows();
        let mut p = self.b.matmul_t(&self.b)?;
        check_full_rank(&p)?;
        let bound = (0..r)
            .map(|i| p.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let c = (0.5f64).min(2.0 / bound);
        for i in 0..r {
            p.data_mut()[i * r + i] -= 1.0;
        }
        let delta = p.matmul(&self.b)?;
        self.b.axpy(-c, &delta)?;
        Ok(())
    }

    pub(crate) fn forward_cached(&self, h: &Tensor, seg_len: usize) -> Result<LayerCache> {
        if h.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                h.cols()
            )));
        }
        let input = splice(h, &self.context, seg_len)?;
        let mid = input.matmul_t(&self.b)?;
        let pre = mid.matmul_t(&self.a)?;
        let act = self.activation;
        let out = pre.map(|v| act.apply(v));
        Ok(LayerCache { input, mid, pre, out })
    }

    pub fn forward(&self, h: &Tensor, seg_len: usize) -> Result<Tensor> {
        Ok(self.forward_cached(h, seg_len)?.out)
    }

    /// Gradients of the factors and of the (unspliced) layer input, given the
    /// gradient `d_out` of the loss with respect to this layer's output.
    pub(crate) fn backward(
        &self,
        cache: &LayerCache,
        d_out: &Tensor,
        seg_len: usize,
        need_input: bool,
    ) -> Result<(LayerGrad, Option<Tensor>)> {
        let act = self.activation;
        let mut d_pre = d_out.clone();
        for (d, &z) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= act.derivative(z);
        }
        let ga = d_pre.t_matmul(&cache.mid)?;
        let d_mid = d_pre.matmul(&self.a)?;
        let gb = d_mid.t_matmul(&cache.input)?;
        let d_in = if need_input {
            let d_spliced = d_mid.matmul(&self.b)?;
            Some(unsplice(&d_spliced, &self.context, seg_len, self.in_dim())?)
        } else {
            None
        };
        Ok((LayerGrad { a: ga, b: gb }, d_in))
    }
}

pub fn semi_orth_residual(b: &Tensor) -> f64 {
    let r = b.rows();
    match b.matmul_t(b) {
        Ok(p) => {
            let mut s = 0.0;
            for i in 0..r {
                for j in 0..r {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let d = p.at(i, j) - target;
                    s += d * d;
                }
            }
            s.sqrt()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Cholesky-based rank test on the Gram matrix `B·Bᵀ`.
fn check_full_rank(gram: &Tensor) -> Result<()> {
    let n = gram.rows();
    let trace: f64 = (0..n).map(|i| gram.at(i, i)).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = gram.at(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) {
            return Err(Error::Conditioning(format!(
                "B is rank deficient (pivot {d:.3e} at row {j})"
            )));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = gram.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(())
}

#[inline]
fn source_row(t: usize, offset: i32, seg_len: usize) -> usize {
    let seg_start = t - t % seg_len;
    let local = (t % seg_len) as i64 + offset as i64;
    seg_start + local.clamp(0, seg_len as i64 - 1) as usize
}

/// Frame splicing: row `t` of the result concatenates rows `t + o` of `h`
/// for each offset, clamped within the segment containing `t`.
pub fn splice(h: &Tensor, offsets: &[i32], seg_len: usize) -> Result<Tensor> {
    if offsets.is_empty() {
        return Ok(h.clone());
    }
    let (t_len, d) = (h.rows(), h.cols());
    if seg_len == 0 || t_len % seg_len != 0 {
        return Err(Error::dim(format!(
            "{t_len} frames do not divide into segments of {seg_len}"
        )));
    }
    let k = offsets.len();
    let mut out = vec![0.0; t_len * k * d];
    for t in 0..t_len {
        for (j, &o) in offsets.iter().enumerate() {
            let src = source_row(t, o, seg_len);
            out[t * k * d + j * d..t * k * d + (j + 1) * d].copy_from_slice(h.row(src));
        }
    }
    Tensor::matrix(t_len, k * d, out)
}

/// Adjoint of [`splice`]: scatters spliced-row gradients back to source rows.
pub fn unsplice(g: &Tensor, offsets: &[i32], seg_len: usize, d: usize) -> Result<Tensor> {
    if offsets.is_empty() {
        return Ok(g.clone());
    }
    let t_len = g.rows();
    let k = offsets.len();
    if g.cols() != k * d {
        return Err(Error::dim("unsplice width"));
    }
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = g.row(t);
        for (j, &o) in offsets.iter().enumerate() {
            let src = source_row(t, o, seg_len);
            for (dst, &v) in out[src * d..(src + 1) * d].iter_mut().zip(&row[j * d..(j + 1) * d]) {
                *dst += v;
            }
        }
    }
    Tensor::matrix(t_len, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_b(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn layer_with_b(b: Tensor) -> FactoredLayer {
        let r = b.rows();
        FactoredLayer::new(Tensor::eye(r), b, Activation::Identity, vec![]).unwrap()
    }

    /// Rows of a random matrix orthonormalised by Gram-Schmidt.
    fn semi_orthogonal(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < r {
            let mut v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn fixed_point_when_semi_orthogonal() {
        let mut rng = Rng::new(3);
        let q = semi_orthogonal(&mut rng, 4, 10);
        let mut layer = layer_with_b(q.clone());
        layer.semi_orth_step().unwrap();
        assert!(layer.b().sub(&q).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn doubled_orthogonal_converges_within_twenty_steps() {
        let mut rng = Rng::new(4);
        let q = semi_orthogonal(&mut rng, 4, 10);
        let mut layer = layer_with_b(q.scale(2.0));
        let mut steps = 0;
        while layer.semi_orth_residual() >= 1e-6 {
            layer.semi_orth_step().unwrap();
            steps += 1;
            assert!(steps <= 20);
        }
    }

    #[test]
    fn residual_decreases_monotonically() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let mut layer = layer_with_b(random_b(&mut rng, 4, 16, 1.0));
            let mut prev = layer.semi_orth_residual();
            for _ in 0..10 {
                layer.semi_orth_step().unwrap();
                let now = layer.semi_orth_residual();
                assert!(now < prev || prev <= SEMI_ORTH_TOL, "{now} !< {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn large_singular_values_still_decrease() {
        let mut rng = Rng::new(8);
        let mut layer = layer_with_b(random_b(&mut rng, 3, 6, 5.0));
        let mut prev = layer.semi_orth_residual();
        for _ in 0..60 {
            layer.semi_orth_step().unwrap();
            let now = layer.semi_orth_residual();
            assert!(now < prev || prev <= SEMI_ORTH_TOL);
            prev = now;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let mut layer = layer_with_b(b);
        assert!(matches!(layer.semi_orth_step(), Err(Error::Conditioning(_))));
    }

    #[test]
    fn init_is_semi_orthogonal() {
        let spec = LayerSpec {
            out_dim: 12,
            in_dim: 5,
            bottleneck: 4,
            activation: Activation::Relu,
            context: vec![-1, 0, 1],
        };
        let layer = FactoredLayer::init(&spec, &mut Rng::new(0)).unwrap();
        assert!(layer.semi_orth_residual() <= 1e-3);
        assert_eq!(layer.spliced_in_dim(), 15);
        assert_eq!(layer.param_count(), spec.param_count());
    }

    #[test]
    fn bottleneck_bound_enforced() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(FactoredLayer::new(a, b, Activation::Identity, vec![]).is_err());
    }

    #[test]
    fn splice_and_adjoint() {
        let h = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let s = splice(&h, &[-1, 0, 1], 2).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 2.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 3.0, 4.0, 4.0]);
        // <splice(h), g> == <h, unsplice(g)>
        let mut rng = Rng::new(1);
        let g = random_b(&mut rng, 4, 3, 1.0);
        let lhs = s.dot(&g).unwrap();
        let rhs = h.dot(&unsplice(&g, &[-1, 0, 1], 2, 1).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
