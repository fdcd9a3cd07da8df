use serde::{Deserialize, Serialize};

use super::conv::causal_conv1d;
use super::scan::{decay, selective_scan, ssd_chunked, ScanInputs, ScanShape};
use super::weights::{SsmBlockWeights, Variant};
use crate::error::{Error, Result};
use crate::hadamard::fwht_in_place;
use crate::quant::{fake_quantize, ScaleLayout};
use crate::tensor::{linear, rms_norm, softplus, Tensor};

/// Activation sites visited during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Input of in_proj.
    U,
    Z,
    /// SSM input after conv + SiLU.
    X,
    B,
    C,
    /// Δ after softplus.
    Dt,
    /// Input of out_proj before any online transform.
    Y,
    /// Input of out_proj after the online Hadamard transform.
    YHad,
    /// Recurrent state after each step, flattened `[heads·head_dim·d_state]`.
    State,
}

impl Site {
    pub const ALL: [Site; 9] = [
        Site::U,
        Site::Z,
        Site::X,
        Site::B,
        Site::C,
        Site::Dt,
        Site::Y,
        Site::YHad,
        Site::State,
    ];
}

/// Observes (and may rewrite in place) activations at each site.
pub trait SiteHook {
    fn visit(&mut self, site: Site, t: &mut Tensor) -> Result<()>;

    /// Whether [`Site::State`] should be reported after every scan step.
    fn wants_state(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl SiteHook for NoHook {
    fn visit(&mut self, _: Site, _: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Chunked(usize),
}

/// Recurrent state carried between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub h: Tensor,
    pub conv_cache: Tensor,
}

impl SsmState {
    pub fn zeros(w: &SsmBlockWeights) -> Self {
        let d = &w.dims;
        let v = w.variant;
        Self {
            h: Tensor::zeros(&[d.scan_heads(v), d.scan_head_dim(v), d.d_state]),
            conv_cache: Tensor::zeros(&[d.conv_channels(v), d.conv_kernel - 1]),
        }
    }
}

pub fn scan_shape(w: &SsmBlockWeights) -> ScanShape {
    let d = &w.dims;
    let v = w.variant;
    ScanShape {
        heads: d.scan_heads(v),
        head_dim: d.scan_head_dim(v),
        groups: d.n_state_groups,
        d_state: d.d_state,
        a_cols: d.a_cols(v),
    }
}

/// Split of the in_proj output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedInputs {
    pub z: Tensor,
    /// `x` before the convolution.
    pub x: Tensor,
    /// Mamba2 only (pre-conv); Mamba1 derives B/C/Δ from the conv output.
    pub b: Option<Tensor>,
    pub c: Option<Tensor>,
    pub dt_raw: Option<Tensor>,
}

/// Split an in_proj output `[T × rows]` into its slices.
pub fn split_projection(w: &SsmBlockWeights, proj: &Tensor) -> Result<ProjectedInputs> {
    let (_, rows) = proj.dims2()?;
    if rows != w.dims.in_proj_rows(w.variant) {
        return Err(Error::shape(format!(
            "in_proj output width {rows} vs {}",
            w.dims.in_proj_rows(w.variant)
        )));
    }
    let [z, x, b, c, dt] = w.in_proj_slices();
    let take = |(s, n): (usize, usize)| proj.slice_cols(s, n);
    Ok(match w.variant {
        Variant::Mamba1 => ProjectedInputs {
            z: take(z)?,
            x: take(x)?,
            b: None,
            c: None,
            dt_raw: None,
        },
        Variant::Mamba2 => ProjectedInputs {
            z: take(z)?,
            x: take(x)?,
            b: Some(take(b)?),
            c: Some(take(c)?),
            dt_raw: Some(take(dt)?),
        },
    })
}

pub fn project_inputs(u: &Tensor, w: &SsmBlockWeights) -> Result<ProjectedInputs> {
    split_projection(w, &linear(u, &w.in_proj)?)
}

/// Mamba1's sequential projections of the conv output: `(Δ_raw, B, C)`.
pub fn mamba1_projections(x: &Tensor, w: &SsmBlockWeights) -> Result<(Tensor, Tensor, Tensor)> {
    let (Some(xp), Some(dp)) = (&w.x_proj, &w.dt_proj) else {
        return Err(Error::shape("Mamba1 block without x_proj/dt_proj"));
    };
    let r = w.dims.dt_rank;
    let s = w.dims.d_state;
    let p = linear(x, xp)?;
    let dt_low = p.slice_cols(0, r)?;
    let b = p.slice_cols(r, s)?;
    let c = p.slice_cols(r + s, s)?;
    Ok((linear(&dt_low, dp)?, b, c))
}

type ProjFn<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor>;

/// Everything a forward pass needs; the projections are pluggable so the
/// quantized path can run integer GEMMs.
pub(crate) struct Exec<'a> {
    pub w: &'a SsmBlockWeights,
    pub in_proj: ProjFn<'a>,
    pub out_proj: ProjFn<'a>,
    pub state_layout: Option<&'a ScaleLayout>,
    pub mode: ScanMode,
    /// `out_proj` applies the online Hadamard transform itself.
    pub fused_online_hadamard: bool,
}

pub(crate) fn run(
    exec: &Exec,
    u: &Tensor,
    hook: &mut dyn SiteHook,
    state: Option<&mut SsmState>,
) -> Result<Tensor> {
    let w = exec.w;
    let d = &w.dims;
    let (t_len, width) = u.dims2()?;
    if width != d.d_model {
        return Err(Error::shape(format!(
            "block input width {width} vs d_model {}",
            d.d_model
        )));
    }
    let (mut h_state, mut conv_cache) = match state {
        Some(s) => (Some(&mut s.h), Some(&mut s.conv_cache)),
        None => (None, None),
    };

    let mut u = u.clone();
    hook.visit(Site::U, &mut u)?;
    let proj = split_projection(w, &(exec.in_proj)(&u)?)?;
    let mut z = proj.z;
    hook.visit(Site::Z, &mut z)?;

    let (mut x, mut b, mut c, dt_raw) = match w.variant {
        Variant::Mamba2 => {
            let xbc_in =
                concat_cols(&[&proj.x, proj.b.as_ref().unwrap(), proj.c.as_ref().unwrap()])?;
            let xbc = causal_conv1d(
                &xbc_in,
                &w.conv_weight,
                w.conv_bias.data(),
                conv_cache.as_deref_mut(),
            )?;
            let bc = d.bc_width();
            let x = xbc.slice_cols(0, d.d_inner)?;
            let b = xbc.slice_cols(d.d_inner, bc)?;
            let c = xbc.slice_cols(d.d_inner + bc, bc)?;
            (x, b, c, proj.dt_raw.unwrap())
        }
        Variant::Mamba1 => {
            let mut x = causal_conv1d(&proj.x, &w.conv_weight, w.conv_bias.data(), conv_cache)?;
            hook.visit(Site::X, &mut x)?;
            let (dt_raw, b, c) = mamba1_projections(&x, w)?;
            (x, b, c, dt_raw)
        }
    };
    if w.variant == Variant::Mamba2 {
        hook.visit(Site::X, &mut x)?;
    }
    hook.visit(Site::B, &mut b)?;
    hook.visit(Site::C, &mut c)?;

    let mut dt = dt_raw;
    for t in 0..t_len {
        for (v, bias) in dt.row_mut(t).iter_mut().zip(w.dt_bias.data()) {
            *v = softplus(*v + bias);
        }
    }
    hook.visit(Site::Dt, &mut dt)?;
    let a_bar = decay(&dt, &w.a())?;

    let shape = scan_shape(w);
    let inputs = ScanInputs {
        x: &x,
        a_bar: &a_bar,
        dt: &dt,
        b: &b,
        c: &c,
        d: w.d_param.data(),
        z: Some(&z),
    };
    let y = match exec.mode {
        ScanMode::Sequential => {
            if hook.wants_state() {
                let mut err = Ok(());
                let mut obs = |h: &[f32]| {
                    if err.is_ok() {
                        let mut t = Tensor::vector(h.to_vec());
                        err = hook.visit(Site::State, &mut t);
                    }
                };
                let y = selective_scan(&inputs, &shape, h_state.as_deref_mut(), Some(&mut obs))?;
                err?;
                y
            } else {
                selective_scan(&inputs, &shape, h_state.as_deref_mut(), None)?
            }
        }
        ScanMode::Chunked(k) => ssd_chunked(&inputs, &shape, k, h_state.as_deref_mut())?,
    };
    if let (Some(layout), Some(h)) = (exec.state_layout, h_state) {
        *h = fake_quantize(h, layout, 8)?;
    }

    let mut y = rms_norm(&y, w.norm_weight.data())?;
    hook.visit(Site::Y, &mut y)?;
    if w.online_hadamard() && !exec.fused_online_hadamard {
        crate::hadamard::check_pow2(d.d_inner)?;
        y.data_mut().chunks_mut(d.d_inner).for_each(fwht_in_place);
        hook.visit(Site::YHad, &mut y)?;
    }
    (exec.out_proj)(&y)
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.n_rows());
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, w) = p.dims2()?;
        if r != rows {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        widths.push(w);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, total], out)
}

fn float_exec<'a>(
    w: &'a SsmBlockWeights,
    in_proj: ProjFn<'a>,
    out_proj: ProjFn<'a>,
    mode: ScanMode,
) -> Exec<'a> {
    Exec {
        w,
        in_proj,
        out_proj,
        state_layout: None,
        mode,
        fused_online_hadamard: false,
    }
}

/// Reference forward: project → conv → discretize → scan → gate → norm →
/// (online Hadamard if fused) → out_proj.
pub fn block_forward_float(u: &Tensor, w: &SsmBlockWeights) -> Result<Tensor> {
    block_forward_float_with(u, w, &mut NoHook, None, ScanMode::Sequential)
}

pub fn block_forward_float_with(
    u: &Tensor,
    w: &SsmBlockWeights,
    hook: &mut dyn SiteHook,
    state: Option<&mut SsmState>,
    mode: ScanMode,
) -> Result<Tensor> {
    let inp = |x: &Tensor| linear(x, &w.in_proj);
    let out = |y: &Tensor| linear(y, &w.out_proj);
    run(&float_exec(w, &inp, &out, mode), u, hook, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::ssm::weights::BlockDims;
    use crate::tensor::metrics;

    fn small(variant: Variant) -> BlockDims {
        BlockDims {
            d_model: 8,
            d_inner: 16,
            d_state: 4,
            n_heads: 4,
            head_dim: 4,
            n_state_groups: if variant == Variant::Mamba2 { 2 } else { 1 },
            conv_kernel: 3,
            dt_rank: 2,
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        for v in [Variant::Mamba1, Variant::Mamba2] {
            let mut w = SsmBlockWeights::random(v, small(v), &mut Rng::new(1)).unwrap();
            w.conv_bias = Tensor::zeros(w.conv_bias.shape());
            let y = block_forward_float(&Tensor::zeros(&[5, 8]), &w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_like_in_proj_slices() {
        let v = Variant::Mamba2;
        let mut dims = small(v);
        dims.d_model = 64;
        dims.d_inner = 16;
        let mut w = SsmBlockWeights::random(v, dims, &mut Rng::new(2)).unwrap();
        let rows = dims.in_proj_rows(v);
        // row r picks coordinate r
        w.in_proj = Tensor::from_fn(&[rows, 64], |i| if i / 64 == i % 64 { 1.0 } else { 0.0 });
        let u = Tensor::from_fn(&[1, 64], |i| i as f32 + 0.5);
        let p = project_inputs(&u, &w).unwrap();
        let [zs, xs, bs, cs, ds] = w.in_proj_slices();
        let check = |t: &Tensor, (s, n): (usize, usize)| {
            assert_eq!(t.data(), &u.data()[s..s + n]);
        };
        check(&p.z, zs);
        check(&p.x, xs);
        check(p.b.as_ref().unwrap(), bs);
        check(p.c.as_ref().unwrap(), cs);
        check(p.dt_raw.as_ref().unwrap(), ds);
    }

    #[test]
    fn projection_matches_hand_slicing() {
        let v = Variant::Mamba2;
        let w = SsmBlockWeights::random(v, small(v), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        let u = Tensor::from_fn(&[6, 8], |_| rng.normal());
        let p = project_inputs(&u, &w).unwrap();
        let full = linear(&u, &w.in_proj).unwrap();
        let [_, _, bs, ..] = w.in_proj_slices();
        for t in 0..6 {
            assert_eq!(
                p.b.as_ref().unwrap().row(t),
                &full.row(t)[bs.0..bs.0 + bs.1]
            );
        }
    }

    #[test]
    fn chunked_mode_matches_sequential() {
        for v in [Variant::Mamba1, Variant::Mamba2] {
            let w = SsmBlockWeights::random(v, small(v), &mut Rng::new(5)).unwrap();
            let mut rng = Rng::new(6);
            let u = Tensor::from_fn(&[33, 8], |_| rng.normal());
            let a = block_forward_float(&u, &w).unwrap();
            let b =
                block_forward_float_with(&u, &w, &mut NoHook, None, ScanMode::Chunked(8)).unwrap();
            assert!(metrics::rel_l2(b.data(), a.data()) <= 1e-4);
        }
    }

    #[test]
    fn stepping_matches_prefill() {
        for v in [Variant::Mamba1, Variant::Mamba2] {
            let w = SsmBlockWeights::random(v, small(v), &mut Rng::new(7)).unwrap();
            let mut rng = Rng::new(8);
            let u = Tensor::from_fn(&[32, 8], |_| rng.normal());
            let full = block_forward_float(&u, &w).unwrap();
            let mut st = SsmState::zeros(&w);
            let mut out = Vec::new();
            for t in 0..32 {
                let y = block_forward_float_with(
                    &u.slice_rows(t, 1).unwrap(),
                    &w,
                    &mut NoHook,
                    Some(&mut st),
                    ScanMode::Sequential,
                )
                .unwrap();
                out.extend_from_slice(y.data());
            }
            assert!(metrics::rel_l2(&out, full.data()) <= 1e-5);
        }
    }
}
