//! Two-party PCA over a shared feature matrix, and query compression with
//! the resulting per-party state.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{truncate, truncate_slice, FixedPointConfig, Fx};
use crate::party::{sub_rng, Party};
use crate::protocols::{
    condition, reveal, reveal_to, scoped, send_public, tag, MulRound, MAT_INV_RETRIES,
    MAX_CONDITION,
};
use rand_chacha::ChaCha20Rng;

/// Rayleigh-quotient convergence, relative to the spectral radius.
pub const EIG_TOL: f64 = 1e-10;
pub const EIG_MAX_ITERS: usize = 10_000;
/// Residual bound for an accepted eigenpair, relative to `|Y|_F`.
pub const EIG_RESIDUAL: f64 = 1e-6;
/// Eigenvalues closer than this (relative) are treated as one eigenspace.
pub const DEGENERATE: f64 = 1e-8;

const MASK_STREAM: &str = "sec_pca";
/// Public factor applied to `P_i·T` before normalisation; it cancels in the
/// division by `√r` and keeps share truncation small relative to `V`.
const V_SCALE: Fx = 1024.0;

/// Per-party state kept for query time. Both parts are grid shares.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaState {
    pub mean: Vec<Fx>,
    /// `d × s`
    pub v: DMatrix<Fx>,
}

impl PcaState {
    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.v.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct PcaOutput {
    /// `n × s` shares of the compressed features.
    pub features: DMatrix<Fx>,
    pub state: PcaState,
    /// The public eigenvector matrix chosen by P1 (`d × s`).
    pub t: DMatrix<Fx>,
}

/// One party's masks for a single attempt.
#[derive(Debug, Clone)]
pub struct PcaMasks {
    /// Grid values in `[-1, 1]`.
    pub p: DMatrix<Fx>,
    /// Nonzero integers in `[-8, 8]`.
    pub z: DMatrix<Fx>,
    /// Integer in `[2048, 4096)`.
    pub t: Fx,
}

pub fn draw_masks(rng: &mut ChaCha20Rng, d: usize, cfg: &FixedPointConfig) -> PcaMasks {
    let p = DMatrix::from_fn(d, d, |_, _| truncate(rng.gen_range(-1.0..=1.0), cfg));
    let z = DMatrix::from_fn(d, d, |_, _| {
        let m = rng.gen_range(1..=8) as Fx;
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    });
    let t = rng.gen_range(2048..4096) as Fx;
    PcaMasks { p, z, t }
}

fn acceptable(w: &DMatrix<Fx>) -> bool {
    condition(w).is_some_and(|c| c <= MAX_CONDITION)
}

/// The combined similarity transform `P` and scale `t` that a session with
/// the given party seeds ends up using, replaying the retry rule.
pub fn rebuild_masks(
    seed1: u64,
    seed2: u64,
    d: usize,
    cfg: &FixedPointConfig,
) -> Result<(DMatrix<Fx>, Fx)> {
    let mut r1 = sub_rng(seed1, MASK_STREAM);
    let mut r2 = sub_rng(seed2, MASK_STREAM);
    for _ in 0..MAT_INV_RETRIES {
        let a = draw_masks(&mut r1, d, cfg);
        let b = draw_masks(&mut r2, d, cfg);
        let p = &a.p + &b.p;
        let w = (&a.z + &b.z) * &p;
        if acceptable(&w) {
            return Ok((p, a.t + b.t));
        }
    }
    Err(Error::SingularP)
}

/// Column means of this party's share (snapped to the grid) and the
/// centred share.
pub fn center(x: &DMatrix<Fx>, cfg: &FixedPointConfig) -> (Vec<Fx>, DMatrix<Fx>) {
    let mut xc = x.clone();
    truncate_slice(xc.as_mut_slice(), cfg);
    let n = xc.nrows() as Fx;
    let mean: Vec<Fx> = (0..xc.ncols())
        .map(|j| truncate(xc.column(j).sum() / n, cfg))
        .collect();
    for (j, m) in mean.iter().enumerate() {
        xc.column_mut(j).add_scalar_mut(-m);
    }
    (mean, xc)
}

/// Flip `col` so its largest-magnitude entry is positive (first on ties).
pub fn canonical_sign(col: &mut [Fx]) -> bool {
    let mut best = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    let flip = col.get(best).is_some_and(|&v| v < 0.0);
    if flip {
        col.iter_mut().for_each(|v| *v = -*v);
    }
    flip
}

fn shifted_solve(
    y: &DMatrix<f64>,
    lam: f64,
    radius: f64,
    basis: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    let d = y.nrows();
    let shift = lam + 1e-9 * radius;
    let lu = (y - DMatrix::identity(d, d) * shift).lu();
    let mut v = DVector::from_fn(d, |i, _| 1.0 + ((i + 1) as f64).sin() * 0.5);
    v /= v.norm();
    let mut mu_prev = f64::INFINITY;
    let mut mu = lam;
    for _ in 0..EIG_MAX_ITERS {
        let mut w = lu.solve(&v).ok_or(Error::EigensolverNoConverge)?;
        for q in basis {
            let c = q.dot(&w);
            w -= q * c;
        }
        let norm = w.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::EigensolverNoConverge);
        }
        v = w / norm;
        mu = v.dot(&(y * &v));
        if (mu - mu_prev).abs() <= EIG_TOL * radius {
            break;
        }
        mu_prev = mu;
    }
    Ok((mu, v))
}

/// Top-`s` eigenpairs of a matrix with a real spectrum, largest first.
/// Eigenvalues come from the real Schur form; each vector is refined by
/// shifted inverse iteration. Columns are unit length in canonical sign.
pub fn top_eigenpairs(y: &DMatrix<f64>, s: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = y.nrows();
    if y.ncols() != d || s > d {
        return Err(Error::ShapeMismatch(format!("{:?} top {s}", y.shape())));
    }
    let frob = y.norm();
    if !frob.is_finite() {
        return Err(Error::EigensolverNoConverge);
    }
    if frob == 0.0 {
        return Ok((vec![0.0; s], DMatrix::identity(d, s)));
    }
    let eig = Schur::try_new(y.clone(), f64::EPSILON, EIG_MAX_ITERS)
        .ok_or(Error::EigensolverNoConverge)?
        .complex_eigenvalues();
    let radius = eig.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if eig.iter().any(|c| c.im.abs() > EIG_RESIDUAL * radius) {
        return Err(Error::EigensolverNoConverge);
    }
    let mut lams: Vec<f64> = eig.iter().map(|c| c.re).collect();
    lams.sort_by(|a, b| b.total_cmp(a));

    let mut vals: Vec<f64> = Vec::with_capacity(s);
    let mut vecs: Vec<DVector<f64>> = Vec::with_capacity(s);
    for &lam in lams.iter().take(s) {
        let basis: Vec<DVector<f64>> = vals
            .iter()
            .zip(&vecs)
            .filter(|(l, _)| (**l - lam).abs() <= DEGENERATE * radius)
            .map(|(_, v)| DVector::clone(v))
            .collect();
        let (mu, mut v) = shifted_solve(y, lam, radius, &basis)?;
        if (y * &v - &v * mu).norm() > EIG_RESIDUAL * frob.max(f64::MIN_POSITIVE) {
            return Err(Error::EigensolverNoConverge);
        }
        canonical_sign(v.as_mut_slice());
        vals.push(mu);
        vecs.push(v);
    }
    let mut t = DMatrix::zeros(d, s);
    for (k, v) in vecs.iter().enumerate() {
        t.set_column(k, v);
    }
    Ok((vals, t))
}

/// Shared PCA: returns the compressed feature shares and the state used to
/// compress queries. Seven rounds when the first mask draw is accepted.
pub fn sec_pca(p: &mut Party, x: &DMatrix<Fx>, s: usize) -> Result<PcaOutput> {
    let (n, d) = x.shape();
    if s == 0 || s > d || n < 2 {
        return Err(Error::ShapeMismatch(format!("n={n} d={d} s={s}")));
    }
    scoped(p, tag::SEC_PCA, |p| {
        let cfg = p.cfg;
        let (mean, xc) = center(x, &cfg);
        let mut rng = p.sub_rng(MASK_STREAM);

        let mut attempt = 0;
        let (masks, w, m) = loop {
            let masks = draw_masks(&mut rng, d, &cfg);
            let mut r = MulRound::new();
            let hw = r.mat(masks.z.clone(), masks.p.clone());
            let hs = r.mat(xc.transpose(), xc.clone());
            let ht = r.elem(vec![masks.t; d * d], masks.p.as_slice().to_vec());
            let mut o = r.run(p)?;
            let w_share = o.mat(hw);
            let xtx = o.mat(hs);
            let tp = DMatrix::from_vec(d, d, o.vec(ht));

            let mut r = MulRound::new();
            let hr = r.reveal(w_share.as_slice().to_vec(), "sec_mat_inv", "W");
            let hm = r.mat(xtx, tp);
            let mut o = r.run(p)?;
            let w = DMatrix::from_vec(d, d, o.revealed(hr));
            if acceptable(&w) {
                break (masks, w, o.mat(hm));
            }
            attempt += 1;
            if attempt >= MAT_INV_RETRIES {
                return Err(Error::SingularP);
            }
        };
        let w_inv = w.try_inverse().ok_or(Error::SingularP)?;

        let mut r = MulRound::new();
        let hz = r.mat(masks.z.clone(), m);
        let zm = r.run(p)?.mat(hz);
        let y_share = &w_inv * zm;

        let y = reveal_to(p, y_share.as_slice(), true, "sec_pca", "Y")?;
        let solved = match y {
            Some(y) => Some(top_eigenpairs(&DMatrix::from_vec(d, d, y), s)),
            None => None,
        };
        let payload: Option<Vec<Fx>> = match &solved {
            Some(Ok((_, t))) => Some(t.as_slice().to_vec()),
            // an empty message tells P2 the solve failed
            Some(Err(_)) => Some(Vec::new()),
            None => None,
        };
        let t_vals = send_public(p, true, payload.as_deref())?;
        if let Some(Err(e)) = solved {
            return Err(e);
        }
        if t_vals.len() != d * s {
            return Err(Error::EigensolverNoConverge);
        }
        p.note_reveal("sec_pca", "T", &t_vals);
        let t = DMatrix::from_vec(d, s, t_vals);
        let v = &masks.p * &t * V_SCALE;

        let mut r = MulRound::new();
        let hu = r.elem(v.as_slice().to_vec(), v.as_slice().to_vec());
        let hf = r.mat(xc, v.clone());
        let mut o = r.run(p)?;
        let u = DMatrix::from_vec(d, s, o.vec(hu));
        let xv = o.mat(hf);

        let sums: Vec<Fx> = (0..s).map(|k| u.column(k).sum()).collect();
        let rs = reveal(p, &sums, "sec_pca", "r")?;
        if rs.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::EigensolverNoConverge);
        }
        let mut v = v;
        let mut features = xv;
        for (k, r) in rs.iter().enumerate() {
            let root = r.sqrt();
            v.column_mut(k).unscale_mut(root);
            features.column_mut(k).unscale_mut(root);
        }
        truncate_slice(v.as_mut_slice(), &cfg);
        Ok(PcaOutput {
            features,
            state: PcaState { mean, v },
            t,
        })
    })
}

/// Compress several query shares (rows of `q`) in one round.
pub fn compress_batch(p: &mut Party, q: &DMatrix<Fx>, state: &PcaState) -> Result<DMatrix<Fx>> {
    if q.ncols() != state.dim() || state.mean.len() != state.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query width {} vs state dim {}",
            q.ncols(),
            state.dim()
        )));
    }
    scoped(p, tag::COMPRESS_QUERY, |p| {
        let mut r = MulRound::new();
        let hs: Vec<_> = q
            .row_iter()
            .map(|row| {
                let c = DMatrix::from_fn(1, row.len(), |_, j| row[j] - state.mean[j]);
                r.mat(c, state.v.clone())
            })
            .collect();
        let mut o = r.run(p)?;
        let mut out = DMatrix::zeros(q.nrows(), state.target_dim());
        for (i, h) in hs.into_iter().enumerate() {
            out.set_row(i, &o.mat(h).row(0));
        }
        Ok(out)
    })
}

/// `(q − m)·V` on shares. One round.
pub fn compress_query(p: &mut Party, q: &[Fx], state: &PcaState) -> Result<Vec<Fx>> {
    let m = DMatrix::from_row_slice(1, q.len(), q);
    Ok(compress_batch(p, &m, state)?.row(0).iter().copied().collect())
}

/// Plaintext counterpart: mean and top-`s` principal directions, signed the
/// way the shared run signs them under similarity transform `p`.
pub fn plain_pca(
    x: &DMatrix<Fx>,
    s: usize,
    p: Option<&DMatrix<Fx>>,
) -> Result<(Vec<Fx>, DMatrix<Fx>)> {
    let (n, d) = x.shape();
    if s == 0 || s > d || n == 0 {
        return Err(Error::ShapeMismatch(format!("n={n} d={d} s={s}")));
    }
    let mean: Vec<Fx> = (0..d).map(|j| x.column(j).mean()).collect();
    let mut xc = x.clone();
    for (j, m) in mean.iter().enumerate() {
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let eig = SymmetricEigen::new(xc.transpose() * &xc);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let p_inv = match p {
        Some(p) => Some(p.clone().try_inverse().ok_or(Error::SingularP)?),
        None => None,
    };
    let mut v = DMatrix::zeros(d, s);
    for (k, &i) in order.iter().take(s).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut probe = match &p_inv {
            Some(pi) => pi * &col,
            None => col.clone(),
        };
        if canonical_sign(probe.as_mut_slice()) {
            col.neg_mut();
        }
        v.set_column(k, &col);
    }
    Ok((mean, v))
}

/// Material consumed by one accepted [`sec_pca`] attempt.
pub mod demand {
    use crate::dealer::MaterialPlan;

    pub fn pca(plan: &mut MaterialPlan, n: usize, d: usize, s: usize) {
        plan.triples((d, d, d), 3)
            .triples((d, n, d), 1)
            .triples((n, d, s), 1)
            .scalars((d * d + d * s) as u64);
    }

    pub fn compress(plan: &mut MaterialPlan, queries: usize, d: usize, s: usize) {
        plan.triples((1, d, s), queries as u64);
    }
}
