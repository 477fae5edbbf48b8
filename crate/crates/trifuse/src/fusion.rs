//! Low-rank trimodal fusion.
//!
//! The fused vector is computed from rank-`r` per-modality factor stacks:
//! each 1-appended context vector is projected through its `r` factor
//! matrices, the three projections are multiplied element-wise, and the rank
//! terms are summed. [`tensor_fuse_oracle`] keeps the expensive route as
//! ground truth (the materialized three-way outer product contracted with
//! the dense weight tensor), and [`cp_reconstruct`] expands the factors into
//! that dense tensor so the two routes can be compared exactly.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

/// Rank-`r` factor stacks for the three modalities.
///
/// Each stack has shape `[rank, d_m + 1, output_dim]`; the extra input row
/// corresponds to the appended constant 1 and doubles as the per-modality
/// bias path, so there is no separate additive bias on the fused vector.
#[derive(Debug, Clone)]
pub struct LmfParams {
    pub rank: usize,
    pub output_dim: usize,
    pub w_l: Tensor,
    pub w_a: Tensor,
    pub w_v: Tensor,
}

impl LmfParams {
    /// Scaled-normal init (`std = 1/sqrt(rank * output_dim)`) keeping fused
    /// magnitudes O(1).
    pub fn init<R: Rng>(dims: [usize; 3], rank: usize, output_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((rank * output_dim) as f64).sqrt();
        let mut stack = |d: usize| Tensor::normal(vec![rank, d + 1, output_dim], std, rng);
        LmfParams {
            rank,
            output_dim,
            w_l: stack(dims[0]),
            w_a: stack(dims[1]),
            w_v: stack(dims[2]),
        }
    }

    pub fn zeros(dims: [usize; 3], rank: usize, output_dim: usize) -> Self {
        LmfParams {
            rank,
            output_dim,
            w_l: Tensor::zeros(vec![rank, dims[0] + 1, output_dim]),
            w_a: Tensor::zeros(vec![rank, dims[1] + 1, output_dim]),
            w_v: Tensor::zeros(vec![rank, dims[2] + 1, output_dim]),
        }
    }

    /// The pre-append modality dims `[d_l, d_a, d_v]`.
    pub fn input_dims(&self) -> [usize; 3] {
        [
            self.w_l.shape()[1] - 1,
            self.w_a.shape()[1] - 1,
            self.w_v.shape()[1] - 1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("w_l", &self.w_l), ("w_a", &self.w_a), ("w_v", &self.w_v)] {
            if t.rank() != 3 || t.shape()[0] != self.rank || t.shape()[2] != self.output_dim {
                return Err(Error::ShapeMismatch(format!(
                    "lmf {name}: expected [{}, d+1, {}], got {:?}",
                    self.rank,
                    self.output_dim,
                    t.shape()
                )));
            }
            if t.shape()[1] == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "lmf {name}: appended dim must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

/// Dense fusion weight `[(d_l+1), (d_a+1), (d_v+1), d_h]` for the oracle route.
#[derive(Debug, Clone)]
pub struct FullFusionWeight {
    pub w: Tensor,
}

impl FullFusionWeight {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "fusion weight must be rank 4, got {:?}",
                w.shape()
            )));
        }
        Ok(FullFusionWeight { w })
    }
}

/// Append a constant 1 to a plain vector.
pub fn append_one(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 1 {
        return Err(Error::NonVectorInput(z.shape().to_vec()));
    }
    let mut data = z.data().to_vec();
    data.push(1.0);
    Tensor::vector(data)
}

impl LmfParams {
    pub fn bind(&self, tape: &mut Tape, binder: &mut crate::tensor::Binder, prefix: &str) -> BoundLmf {
        BoundLmf {
            rank: self.rank,
            output_dim: self.output_dim,
            w_l: binder.leaf(tape, format!("{prefix}.w_l"), &self.w_l),
            w_a: binder.leaf(tape, format!("{prefix}.w_a"), &self.w_a),
            w_v: binder.leaf(tape, format!("{prefix}.w_v"), &self.w_v),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_l"), &self.w_l);
        f(format!("{prefix}.w_a"), &self.w_a);
        f(format!("{prefix}.w_v"), &self.w_v);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.w_l"), &mut self.w_l);
        f(format!("{prefix}.w_a"), &mut self.w_a);
        f(format!("{prefix}.w_v"), &mut self.w_v);
    }
}

/// Factor stacks bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLmf {
    pub rank: usize,
    pub output_dim: usize,
    pub w_l: NodeId,
    pub w_a: NodeId,
    pub w_v: NodeId,
}

/// Differentiable low-rank fusion of three context vectors.
///
/// `h = sum_r (W_l^r' zhat_l) * (W_a^r' zhat_a) * (W_v^r' zhat_v)` where
/// `zhat_m` is the 1-appended input; returns a `[output_dim]` vector node.
pub fn lmf_fuse(
    tape: &mut Tape,
    z_l: NodeId,
    z_a: NodeId,
    z_v: NodeId,
    p: &BoundLmf,
) -> Result<NodeId> {
    let inputs = [z_l, z_a, z_v];
    let stacks = [p.w_l, p.w_a, p.w_v];
    let mut appended = Vec::with_capacity(3);
    for (&z, &w) in inputs.iter().zip(&stacks) {
        let zshape = tape.shape(z).to_vec();
        if zshape.len() != 1 {
            return Err(Error::NonVectorInput(zshape));
        }
        let wshape = tape.shape(w).to_vec();
        if wshape.len() != 3 || wshape[1] != zshape[0] + 1 {
            return Err(Error::ShapeMismatch(format!(
                "lmf factor stack {:?} does not accept input of dim {}",
                wshape, zshape[0]
            )));
        }
        let zhat = tape.append_one(z)?;
        let d1 = zshape[0] + 1;
        appended.push(tape.reshape(zhat, vec![1, d1])?);
    }
    let mut fused: Option<NodeId> = None;
    for r in 0..p.rank {
        let mut term: Option<NodeId> = None;
        for (&zhat, &w) in appended.iter().zip(&stacks) {
            let factor = tape.plane(w, r)?;
            let proj = tape.matmul(zhat, factor)?; // [1, d_h]
            term = Some(match term {
                None => proj,
                Some(t) => tape.mul(t, proj)?,
            });
        }
        let term = term.expect("three modalities");
        fused = Some(match fused {
            None => term,
            Some(f) => tape.add(f, term)?,
        });
    }
    let fused = fused.ok_or_else(|| Error::InvalidConfig("lmf rank must be >= 1".into()))?;
    tape.reshape(fused, vec![p.output_dim])
}

/// Counted plain-array low-rank fusion; returns the fused vector and the
/// number of multiply-add operations spent in the factor projections.
pub fn lmf_fuse_counted(
    z_l: &Tensor,
    z_a: &Tensor,
    z_v: &Tensor,
    p: &LmfParams,
) -> Result<(Tensor, usize)> {
    p.validate()?;
    let hats = [append_one(z_l)?, append_one(z_a)?, append_one(z_v)?];
    let stacks = [&p.w_l, &p.w_a, &p.w_v];
    for (zhat, w) in hats.iter().zip(&stacks) {
        if w.shape()[1] != zhat.numel() {
            return Err(Error::ShapeMismatch(format!(
                "lmf input dim {} vs factor stack {:?}",
                zhat.numel() - 1,
                w.shape()
            )));
        }
    }
    let d_h = p.output_dim;
    let mut fused = vec![0.0; d_h];
    let mut macs = 0usize;
    for r in 0..p.rank {
        let mut term = vec![1.0; d_h];
        for (zhat, w) in hats.iter().zip(&stacks) {
            let d1 = zhat.numel();
            let mut proj = vec![0.0; d_h];
            for i in 0..d1 {
                let zv = zhat.data()[i];
                for h in 0..d_h {
                    proj[h] += zv * w.at(&[r, i, h]);
                    macs += 1;
                }
            }
            for h in 0..d_h {
                term[h] *= proj[h];
            }
        }
        for h in 0..d_h {
            fused[h] += term[h];
        }
    }
    Ok((Tensor::vector(fused)?, macs))
}

/// Expand the factor stacks into the dense fusion weight:
/// `W[i,j,k,h] = sum_r W_l[r,i,h] * W_a[r,j,h] * W_v[r,k,h]`.
pub fn cp_reconstruct(p: &LmfParams) -> Result<FullFusionWeight> {
    p.validate()?;
    let (dl1, da1, dv1) = (p.w_l.shape()[1], p.w_a.shape()[1], p.w_v.shape()[1]);
    let d_h = p.output_dim;
    let mut w = vec![0.0; dl1 * da1 * dv1 * d_h];
    for r in 0..p.rank {
        for i in 0..dl1 {
            for j in 0..da1 {
                for k in 0..dv1 {
                    let base = ((i * da1 + j) * dv1 + k) * d_h;
                    for h in 0..d_h {
                        w[base + h] +=
                            p.w_l.at(&[r, i, h]) * p.w_a.at(&[r, j, h]) * p.w_v.at(&[r, k, h]);
                    }
                }
            }
        }
    }
    FullFusionWeight::new(Tensor::new(vec![dl1, da1, dv1, d_h], w)?)
}

/// Ground-truth fusion via the materialized outer product
/// `Z = zhat_l x zhat_a x zhat_v` contracted against the dense weight.
pub fn tensor_fuse_oracle(
    z_l: &Tensor,
    z_a: &Tensor,
    z_v: &Tensor,
    w: &FullFusionWeight,
) -> Result<Tensor> {
    Ok(tensor_fuse_counted(z_l, z_a, z_v, w)?.0)
}

/// Counted oracle route; the count covers the contraction multiply-adds.
pub fn tensor_fuse_counted(
    z_l: &Tensor,
    z_a: &Tensor,
    z_v: &Tensor,
    w: &FullFusionWeight,
) -> Result<(Tensor, usize)> {
    let hats = [append_one(z_l)?, append_one(z_a)?, append_one(z_v)?];
    let ws = w.w.shape();
    for (m, zhat) in hats.iter().enumerate() {
        if ws[m] != zhat.numel() {
            return Err(Error::ShapeMismatch(format!(
                "oracle weight {:?} vs appended input dims [{}, {}, {}]",
                ws,
                hats[0].numel(),
                hats[1].numel(),
                hats[2].numel()
            )));
        }
    }
    let (dl1, da1, dv1, d_h) = (ws[0], ws[1], ws[2], ws[3]);
    // materialize the rank-one tensor Z
    let mut z = vec![0.0; dl1 * da1 * dv1];
    for i in 0..dl1 {
        for j in 0..da1 {
            for k in 0..dv1 {
                z[(i * da1 + j) * dv1 + k] =
                    hats[0].data()[i] * hats[1].data()[j] * hats[2].data()[k];
            }
        }
    }
    let mut out = vec![0.0; d_h];
    let mut macs = 0usize;
    for (cell, zv) in z.iter().enumerate() {
        let base = cell * d_h;
        for h in 0..d_h {
            out[h] += zv * w.w.data()[base + h];
            macs += 1;
        }
    }
    Ok((Tensor::vector(out)?, macs))
}

/// Multiply-add count of the low-rank route: `r * d_h * sum_m (d_m + 1)`.
pub fn lmf_mac_count(dims: [usize; 3], rank: usize, d_h: usize) -> usize {
    rank * d_h * dims.iter().map(|d| d + 1).sum::<usize>()
}

/// Multiply-add count of the oracle contraction: `d_h * prod_m (d_m + 1)`.
pub fn oracle_mac_count(dims: [usize; 3], d_h: usize) -> usize {
    d_h * dims.iter().map(|d| d + 1).product::<usize>()
}
