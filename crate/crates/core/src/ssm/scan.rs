use crate::error::{Error, Result};
use crate::tensor::{silu, softplus, Tensor};

/// Layout of the recurrence.
///
/// `x`: `[T × heads·head_dim]`, `Δ`: `[T × heads]`, `Ȧ`: `[T × heads·a_cols]`,
/// `B`/`C`: `[T × groups·d_state]`, `D`: `[heads]`, state `h`:
/// `[heads × head_dim × d_state]`. Head `i` reads state group
/// `i · groups / heads`; `a_cols` is 1 (scalar decay per head) or `d_state`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanShape {
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub d_state: usize,
    pub a_cols: usize,
}

impl ScanShape {
    fn group_of(&self, head: usize) -> usize {
        head * self.groups / self.heads
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.head_dim * self.d_state
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a Tensor,
    pub a_bar: &'a Tensor,
    pub dt: &'a Tensor,
    pub b: &'a Tensor,
    pub c: &'a Tensor,
    pub d: &'a [f32],
    pub z: Option<&'a Tensor>,
}

/// `Δ = softplus(Δ_raw + dt_bias)`, `Ȧ = exp(Δ·A)`.
///
/// `dt_raw` is `[T × heads]`, `a` is `[heads × a_cols]`; returns
/// `(Ȧ [T × heads·a_cols], Δ [T × heads])`.
pub fn discretize(dt_raw: &Tensor, dt_bias: &[f32], a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t_len, heads) = dt_raw.dims2()?;
    let (ah, _) = a.dims2()?;
    if ah != heads || dt_bias.len() != heads {
        return Err(Error::shape(format!(
            "discretize: Δ heads {heads}, bias {}, A rows {ah}",
            dt_bias.len()
        )));
    }
    let mut dt = dt_raw.clone();
    for t in 0..t_len {
        for (v, b) in dt.row_mut(t).iter_mut().zip(dt_bias) {
            *v = softplus(*v + b);
        }
    }
    let a_bar = decay(&dt, a)?;
    Ok((a_bar, dt))
}

/// `Ȧ = exp(Δ·A)` for an already-activated `Δ`.
pub fn decay(dt: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (t_len, heads) = dt.dims2()?;
    let (ah, a_cols) = a.dims2()?;
    if ah != heads {
        return Err(Error::shape(format!(
            "decay: Δ heads {heads} vs A rows {ah}"
        )));
    }
    let ad = a.data();
    let mut out = Vec::with_capacity(t_len * heads * a_cols);
    for t in 0..t_len {
        for (h, &d) in dt.row(t).iter().enumerate() {
            out.extend(
                ad[h * a_cols..(h + 1) * a_cols]
                    .iter()
                    .map(|&av| (d * av).exp()),
            );
        }
    }
    Tensor::new(vec![t_len, heads * a_cols], out)
}

fn check(inp: &ScanInputs, s: &ScanShape, state: Option<&Tensor>) -> Result<usize> {
    let (t_len, xw) = inp.x.dims2()?;
    let want = |t: &Tensor, w: usize, name: &str| -> Result<()> {
        if t.shape() != [t_len, w] {
            return Err(Error::shape(format!(
                "scan {name}: expected [{t_len}, {w}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    if s.heads == 0 || s.groups == 0 || !s.heads.is_multiple_of(s.groups) {
        return Err(Error::shape(format!("scan shape {s:?}")));
    }
    if s.a_cols != 1 && s.a_cols != s.d_state {
        return Err(Error::shape(format!(
            "a_cols {} must be 1 or d_state",
            s.a_cols
        )));
    }
    if xw != s.heads * s.head_dim {
        return Err(Error::shape(format!("scan x width {xw} vs {s:?}")));
    }
    want(inp.dt, s.heads, "Δ")?;
    want(inp.a_bar, s.heads * s.a_cols, "Ȧ")?;
    want(inp.b, s.groups * s.d_state, "B")?;
    want(inp.c, s.groups * s.d_state, "C")?;
    if let Some(z) = inp.z {
        want(z, xw, "z")?;
    }
    if inp.d.len() != s.heads {
        return Err(Error::shape(format!(
            "scan D length {} vs {} heads",
            inp.d.len(),
            s.heads
        )));
    }
    if let Some(h) = state {
        if h.len() != s.state_len() {
            return Err(Error::shape(format!(
                "state {:?} vs [{}, {}, {}]",
                h.shape(),
                s.heads,
                s.head_dim,
                s.d_state
            )));
        }
    }
    Ok(t_len)
}

fn gate(y: &mut [f32], z: Option<&Tensor>) {
    if let Some(z) = z {
        for (v, &g) in y.iter_mut().zip(z.data()) {
            *v *= silu(g);
        }
    }
}

/// Sequential recurrence `h_t = Ȧ_t h_{t−1} + Δ_t B_t x_t`,
/// `y_t = C_t h_t + D x_t`, then `y·SiLU(z)` when `z` is given.
///
/// `state` (if any) is the initial state and receives the final one.
/// `observe` sees the state after every step.
pub fn selective_scan(
    inp: &ScanInputs,
    s: &ScanShape,
    state: Option<&mut Tensor>,
    mut observe: Option<&mut dyn FnMut(&[f32])>,
) -> Result<Tensor> {
    let t_len = check(inp, s, state.as_deref())?;
    let mut h = match &state {
        Some(st) => st.data().to_vec(),
        None => vec![0.0f32; s.state_len()],
    };
    let (p_dim, n) = (s.head_dim, s.d_state);
    let bw = s.groups * n;
    let xw = s.heads * p_dim;
    let (xd, ad, dd, bd, cd) = (
        inp.x.data(),
        inp.a_bar.data(),
        inp.dt.data(),
        inp.b.data(),
        inp.c.data(),
    );
    let mut y = vec![0.0f32; t_len * xw];
    for t in 0..t_len {
        for hd in 0..s.heads {
            let g = s.group_of(hd);
            let bt = &bd[t * bw + g * n..t * bw + (g + 1) * n];
            let ct = &cd[t * bw + g * n..t * bw + (g + 1) * n];
            let at = &ad[(t * s.heads + hd) * s.a_cols..(t * s.heads + hd + 1) * s.a_cols];
            let dt = dd[t * s.heads + hd];
            for p in 0..p_dim {
                let xv = xd[t * xw + hd * p_dim + p];
                let hs = &mut h[(hd * p_dim + p) * n..(hd * p_dim + p + 1) * n];
                let mut acc = 0.0f32;
                for k in 0..n {
                    let a = if s.a_cols == 1 { at[0] } else { at[k] };
                    hs[k] = a * hs[k] + dt * bt[k] * xv;
                    acc += ct[k] * hs[k];
                }
                y[t * xw + hd * p_dim + p] = acc + inp.d[hd] * xv;
            }
        }
        if let Some(obs) = observe.as_deref_mut() {
            obs(&h);
        }
    }
    gate(&mut y, inp.z);
    if let Some(st) = state {
        st.data_mut().copy_from_slice(&h);
    }
    Tensor::new(vec![t_len, xw], y)
}

/// Chunked evaluation of the same recurrence.
///
/// Within a chunk the output is an attention-like product
/// `y_i = Σ_{j≤i} (Σ_k C_ik B_jk e^{seg_k(i,j)} Δ_j) x_j` where
/// `seg_k(i,j) = Σ_{l=j+1..i} log Ȧ_lk` is accumulated directly. The state
/// entering the chunk contributes `Σ_k C_ik e^{Σ_{l≤i} log Ȧ_lk} h_k` and is
/// carried to the next chunk.
pub fn ssd_chunked(
    inp: &ScanInputs,
    s: &ScanShape,
    chunk: usize,
    state: Option<&mut Tensor>,
) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::shape("chunk must be ≥ 1"));
    }
    let t_len = check(inp, s, state.as_deref())?;
    let mut h = match &state {
        Some(st) => st.data().to_vec(),
        None => vec![0.0f32; s.state_len()],
    };
    let (p_dim, n) = (s.head_dim, s.d_state);
    let bw = s.groups * n;
    let xw = s.heads * p_dim;
    let ac = s.a_cols;
    let (xd, dd, bd, cd) = (inp.x.data(), inp.dt.data(), inp.b.data(), inp.c.data());
    let log_a: Vec<f32> = inp.a_bar.data().iter().map(|v| v.ln()).collect();
    let mut y = vec![0.0f32; t_len * xw];

    let mut seg = vec![0.0f32; ac];
    let mut m_row = Vec::new();
    for c0 in (0..t_len).step_by(chunk) {
        let c1 = (c0 + chunk).min(t_len);
        let len = c1 - c0;
        for hd in 0..s.heads {
            let g = s.group_of(hd);
            let la =
                |t: usize, k: usize| log_a[(t * s.heads + hd) * ac + if ac == 1 { 0 } else { k }];
            let bk = |t: usize, k: usize| bd[t * bw + g * n + k];
            let ck = |t: usize, k: usize| cd[t * bw + g * n + k];
            let hs = &mut h[hd * p_dim * n..(hd + 1) * p_dim * n];

            for i in c0..c1 {
                // intra-chunk weights M[i, j] for j = i down to c0
                m_row.clear();
                m_row.resize(len, 0.0f32);
                seg.iter_mut().for_each(|v| *v = 0.0);
                for j in (c0..=i).rev() {
                    if j < i {
                        for (k, sv) in seg.iter_mut().enumerate() {
                            *sv += la(j + 1, k);
                        }
                    }
                    let mut acc = 0.0f32;
                    for k in 0..n {
                        let e = if ac == 1 { seg[0] } else { seg[k] };
                        acc += ck(i, k) * bk(j, k) * e.exp();
                    }
                    m_row[j - c0] = acc * dd[j * s.heads + hd];
                }
                // decay from chunk entry to i: seg(i, c0) + log Ȧ_{c0}
                for (k, sv) in seg.iter_mut().enumerate() {
                    *sv += la(c0, k);
                }
                for p in 0..p_dim {
                    let mut acc = 0.0f32;
                    for j in c0..=i {
                        acc += m_row[j - c0] * xd[j * xw + hd * p_dim + p];
                    }
                    let hp = &hs[p * n..(p + 1) * n];
                    for k in 0..n {
                        let e = if ac == 1 { seg[0] } else { seg[k] };
                        acc += ck(i, k) * e.exp() * hp[k];
                    }
                    let xv = xd[i * xw + hd * p_dim + p];
                    y[i * xw + hd * p_dim + p] = acc + inp.d[hd] * xv;
                }
            }

            // carry: h ← e^{Σ_{l∈chunk} log Ȧ_l} h + Σ_j e^{Σ_{l>j} log Ȧ_l} Δ_j B_j x_j
            seg.iter_mut().for_each(|v| *v = 0.0);
            let mut add = vec![0.0f32; p_dim * n];
            for j in (c0..c1).rev() {
                if j + 1 < c1 {
                    for (k, sv) in seg.iter_mut().enumerate() {
                        *sv += la(j + 1, k);
                    }
                }
                let dtj = dd[j * s.heads + hd];
                for p in 0..p_dim {
                    let xv = xd[j * xw + hd * p_dim + p];
                    for k in 0..n {
                        let e = if ac == 1 { seg[0] } else { seg[k] };
                        add[p * n + k] += e.exp() * dtj * bk(j, k) * xv;
                    }
                }
            }
            for (k, sv) in seg.iter_mut().enumerate() {
                *sv += la(c0, k);
            }
            for p in 0..p_dim {
                for k in 0..n {
                    let e = if ac == 1 { seg[0] } else { seg[k] };
                    let idx = p * n + k;
                    hs[idx] = e.exp() * hs[idx] + add[idx];
                }
            }
        }
    }
    gate(&mut y, inp.z);
    if let Some(st) = state {
        st.data_mut().copy_from_slice(&h);
    }
    Tensor::new(vec![t_len, xw], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::metrics;

    struct Case {
        x: Tensor,
        a_bar: Tensor,
        dt: Tensor,
        b: Tensor,
        c: Tensor,
        d: Vec<f32>,
        z: Tensor,
        shape: ScanShape,
    }

    impl Case {
        fn inputs(&self, gated: bool) -> ScanInputs<'_> {
            ScanInputs {
                x: &self.x,
                a_bar: &self.a_bar,
                dt: &self.dt,
                b: &self.b,
                c: &self.c,
                d: &self.d,
                z: gated.then_some(&self.z),
            }
        }
    }

    fn random_case(seed: u64, t_len: usize, shape: ScanShape) -> Case {
        let mut rng = Rng::new(seed);
        let dt_raw = Tensor::from_fn(&[t_len, shape.heads], |_| rng.normal() - 1.0);
        let a = Tensor::from_fn(&[shape.heads, shape.a_cols], |_| {
            -rng.uniform_range(0.5, 4.0)
        });
        let bias: Vec<f32> = rng.normal_vec(shape.heads, 0.5);
        let (a_bar, dt) = discretize(&dt_raw, &bias, &a).unwrap();
        let xw = shape.heads * shape.head_dim;
        let bw = shape.groups * shape.d_state;
        Case {
            x: Tensor::from_fn(&[t_len, xw], |_| rng.normal()),
            a_bar,
            dt,
            b: Tensor::from_fn(&[t_len, bw], |_| rng.normal()),
            c: Tensor::from_fn(&[t_len, bw], |_| rng.normal()),
            d: rng.normal_vec(shape.heads, 1.0),
            z: Tensor::from_fn(&[t_len, xw], |_| rng.normal()),
            shape,
        }
    }

    const M2: ScanShape = ScanShape {
        heads: 4,
        head_dim: 3,
        groups: 2,
        d_state: 5,
        a_cols: 1,
    };
    const M1: ScanShape = ScanShape {
        heads: 6,
        head_dim: 1,
        groups: 1,
        d_state: 4,
        a_cols: 4,
    };

    /// Independent per-timestep loop with explicit indexing and f64 state.
    fn naive(case: &Case) -> Vec<f32> {
        let s = case.shape;
        let t_len = case.x.n_rows();
        let mut h = vec![0.0f64; s.state_len()];
        let mut out = Vec::new();
        for t in 0..t_len {
            for hd in 0..s.heads {
                let g = hd / (s.heads / s.groups);
                for p in 0..s.head_dim {
                    let xi = hd * s.head_dim + p;
                    let xv = case.x.row(t)[xi] as f64;
                    let mut yv = case.d[hd] as f64 * xv;
                    for k in 0..s.d_state {
                        let a = case.a_bar.row(t)[hd * s.a_cols + if s.a_cols == 1 { 0 } else { k }]
                            as f64;
                        let idx = (hd * s.head_dim + p) * s.d_state + k;
                        h[idx] = a * h[idx]
                            + case.dt.row(t)[hd] as f64
                                * case.b.row(t)[g * s.d_state + k] as f64
                                * xv;
                        yv += case.c.row(t)[g * s.d_state + k] as f64 * h[idx];
                    }
                    out.push(yv as f32);
                }
            }
        }
        out
    }

    #[test]
    fn discretize_examples() {
        let a = Tensor::from_rows(&[&[-1.0]]);
        // softplus(v) = ln 2 ⇔ v = 0
        let (ab, dt) = discretize(&Tensor::from_rows(&[&[0.0]]), &[0.0], &a).unwrap();
        assert!((dt.data()[0] - std::f32::consts::LN_2).abs() < 1e-7);
        assert!((ab.data()[0] - 0.5).abs() < 1e-7);
        let (ab, dt) = discretize(&Tensor::from_rows(&[&[-200.0]]), &[0.0], &a).unwrap();
        assert!(dt.data()[0] < 1e-30);
        assert_eq!(ab.data()[0], 1.0);
    }

    #[test]
    fn scalar_hand_recurrence() {
        let s = ScanShape {
            heads: 1,
            head_dim: 1,
            groups: 1,
            d_state: 1,
            a_cols: 1,
        };
        let ln2 = std::f32::consts::LN_2;
        let one = Tensor::from_rows(&[&[1.0]]);
        let inp = ScanInputs {
            x: &one,
            a_bar: &Tensor::from_rows(&[&[0.5]]),
            dt: &Tensor::from_rows(&[&[ln2]]),
            b: &one,
            c: &one,
            d: &[0.0],
            z: None,
        };
        let mut h = Tensor::zeros(&[1, 1, 1]);
        let y = selective_scan(&inp, &s, Some(&mut h), None).unwrap();
        assert!((h.data()[0] - ln2).abs() < 1e-7);
        assert!((y.data()[0] - ln2).abs() < 1e-7);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let mut case = random_case(3, 9, M2);
        case.a_bar = Tensor::zeros(case.a_bar.shape());
        let y = selective_scan(&case.inputs(false), &M2, None, None).unwrap();
        for t in 0..9 {
            let single = ScanInputs {
                x: &case.x.slice_rows(t, 1).unwrap(),
                a_bar: &case.a_bar.slice_rows(t, 1).unwrap(),
                dt: &case.dt.slice_rows(t, 1).unwrap(),
                b: &case.b.slice_rows(t, 1).unwrap(),
                c: &case.c.slice_rows(t, 1).unwrap(),
                d: &case.d,
                z: None,
            };
            let yt = selective_scan(&single, &M2, None, None).unwrap();
            assert_eq!(yt.data(), y.row(t));
        }
    }

    #[test]
    fn matches_naive_loop() {
        for (seed, shape) in [(1, M2), (2, M1)] {
            let case = random_case(seed, 40, shape);
            let y = selective_scan(&case.inputs(false), &shape, None, None).unwrap();
            assert!(metrics::rel_l2(y.data(), &naive(&case)) <= 1e-6);
        }
    }

    #[test]
    fn chunked_matches_scan() {
        for (seed, shape) in [(5, M2), (6, M1)] {
            for t_len in [1, 7, 64] {
                let case = random_case(seed, t_len, shape);
                let want = selective_scan(&case.inputs(true), &shape, None, None).unwrap();
                for chunk in [1, 3, 16, t_len] {
                    let got = ssd_chunked(&case.inputs(true), &shape, chunk, None).unwrap();
                    let rel = metrics::rel_l2(got.data(), want.data());
                    let tol = if chunk == 1 { 1e-6 } else { 1e-4 };
                    assert!(rel <= tol, "T={t_len} chunk={chunk} rel={rel}");
                }
            }
        }
    }

    #[test]
    fn chunked_carries_state() {
        let case = random_case(8, 20, M2);
        let mut h1 = Tensor::from_fn(&[4, 3, 5], |i| (i as f32 * 0.37).sin());
        let mut h2 = h1.clone();
        let a = selective_scan(&case.inputs(true), &M2, Some(&mut h1), None).unwrap();
        let b = ssd_chunked(&case.inputs(true), &M2, 6, Some(&mut h2)).unwrap();
        assert!(metrics::rel_l2(b.data(), a.data()) <= 1e-4);
        assert!(metrics::rel_l2(h2.data(), h1.data()) <= 1e-4);
    }

    #[test]
    fn state_shape_mismatch() {
        let case = random_case(9, 4, M2);
        let mut h = Tensor::zeros(&[3]);
        assert!(selective_scan(&case.inputs(false), &M2, Some(&mut h), None).is_err());
    }
}
