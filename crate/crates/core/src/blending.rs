//! Spherical interpolation of flattened latents and the two-stage blend
//! that mixes a fidelity prediction with an edited one.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

pub const DEFAULT_PARALLEL_THRESHOLD: f64 = 1e-6;

/// A flattened latent with its original shape kept for the round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl LatentVector {
    pub fn flatten(t: &Tensor) -> Self {
        Self {
            data: t.data().to_vec(),
            shape: t.shape().to_vec(),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(self.shape, self.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendParams {
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub parallel_threshold: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            alpha_inner: 1.0,
            alpha_outer: 0.0,
            parallel_threshold: DEFAULT_PARALLEL_THRESHOLD,
        }
    }
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        check_unit("alpha_inner", self.alpha_inner)?;
        check_unit("alpha_outer", self.alpha_outer)?;
        if !(self.parallel_threshold > 0.0 && self.parallel_threshold < 0.1) {
            return Err(Error::Config(format!(
                "parallel_threshold must lie in (0, 0.1), got {}",
                self.parallel_threshold
            )));
        }
        Ok(())
    }
}

fn check_unit(name: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("{name} must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// Angle between `a` and `b`, accurate near 0 and π.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    slerp_with(a, b, t, DEFAULT_PARALLEL_THRESHOLD)
}

/// Great-circle interpolation from `a` (t = 0) to `b` (t = 1). Near-parallel
/// pairs fall back to linear interpolation rescaled to the interpolated norm.
pub fn slerp_with(a: &[f64], b: &[f64], t: f64, threshold: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("slerp", &[a.len()], &[b.len()]));
    }
    check_unit("slerp t", t)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("slerp endpoint has zero norm"));
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let theta = angle(a, b);
    if theta > std::f64::consts::PI - threshold {
        return Err(Error::Degenerate(format!(
            "slerp endpoints are antipodal (angle {theta:.9} rad)"
        )));
    }
    if theta < threshold {
        let mut l: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let target = (1.0 - t) * na + t * nb;
        let s = target / norm(&l);
        l.iter_mut().for_each(|x| *x *= s);
        return Ok(l);
    }
    let st = theta.sin();
    let (ca, cb) = (((1.0 - t) * theta).sin() / st, (t * theta).sin() / st);
    Ok(a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect())
}

/// `h' = slerp(h, h_geo, α_inner)`.
pub fn inner_blend(h: &LatentVector, h_geo: &LatentVector, alpha_inner: f64) -> Result<LatentVector> {
    if h.shape != h_geo.shape {
        return Err(Error::dim("inner_blend", &h.shape, &h_geo.shape));
    }
    Ok(LatentVector {
        data: slerp(&h.data, &h_geo.data, alpha_inner)?,
        shape: h.shape.clone(),
    })
}

/// Component of `x_sem` orthogonal to `x_fid`.
pub fn orthogonal_component(x_sem: &[f64], x_fid: &[f64]) -> Result<Vec<f64>> {
    if x_sem.len() != x_fid.len() {
        return Err(Error::dim("orthogonal_component", &[x_sem.len()], &[x_fid.len()]));
    }
    let ff = dot(x_fid, x_fid);
    if ff == 0.0 {
        return Err(Error::contract("orthogonal_component: x_fid has zero norm"));
    }
    let mut o = x_sem.to_vec();
    // second pass removes the rounding residue of the first
    for _ in 0..2 {
        let c = dot(&o, x_fid) / ff;
        if c == 0.0 {
            break;
        }
        o.iter_mut().zip(x_fid).for_each(|(x, f)| *x -= c * f);
    }
    Ok(o)
}

/// `Ψ(x_fid, o, α) = slerp(x_fid, o·‖x_fid‖/‖o‖, α)`; returns `x_fid` when
/// `o` vanishes.
pub fn outer_blend(x_fid: &[f64], o: &[f64], alpha_outer: f64) -> Result<Vec<f64>> {
    if x_fid.len() != o.len() {
        return Err(Error::dim("outer_blend", &[x_fid.len()], &[o.len()]));
    }
    check_unit("alpha_outer", alpha_outer)?;
    let nf = norm(x_fid);
    if nf == 0.0 {
        return Err(Error::contract("outer_blend: x_fid has zero norm"));
    }
    let no = norm(o);
    if no == 0.0 || alpha_outer == 0.0 {
        return Ok(x_fid.to_vec());
    }
    let o_hat: Vec<f64> = o.iter().map(|x| x * (nf / no)).collect();
    slerp(x_fid, &o_hat, alpha_outer)
}

/// Fuses two predictions: `Ψ(x_fid, x_sem ⊥ x_fid, α_outer)`.
pub fn fuse(x_fid: &[f64], x_sem: &[f64], alpha_outer: f64) -> Result<Vec<f64>> {
    let o = orthogonal_component(x_sem, x_fid)?;
    outer_blend(x_fid, &o, alpha_outer)
}

fn per_sample(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let batch = a.shape()[0];
    let per = a.len() / batch;
    let mut out = Vec::with_capacity(a.len());
    for i in 0..batch {
        let r = i * per..(i + 1) * per;
        out.extend(f(&a.data()[r.clone()], &b.data()[r])?);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Row-wise [`inner_blend`] over the leading batch axis.
pub fn inner_blend_batch(h: &Tensor, h_geo: &Tensor, alpha_inner: f64) -> Result<Tensor> {
    per_sample(h, h_geo, "inner_blend", |a, b| slerp(a, b, alpha_inner))
}

/// Row-wise [`fuse`] over the leading batch axis.
pub fn fuse_batch(x_fid: &Tensor, x_sem: &Tensor, alpha_outer: f64) -> Result<Tensor> {
    per_sample(x_fid, x_sem, "fuse", |f, s| fuse(f, s, alpha_outer))
}
