//! Two-party online protocols over additive shares.
//!
//! Every function here is called symmetrically by both servers with their
//! own shares and consumes dealer material in the same order on both sides.
//! Batched variants put every instance into the same frames, so the round
//! count does not depend on the batch size.

use nalgebra::DMatrix;
use rand::Rng;

use crate::dealer::{MaterialPlan, Shape};
use crate::error::{Error, Result};
use crate::numeric::{truncate, Fx};
use crate::parallel;
use crate::party::Party;
use crate::sharing::{Share, ShareMatrix};
use crate::transport::{decode_f64s, encode_f64s};

/// Protocol tags carried in every frame header.
pub mod tag {
    pub const CONTROL: u16 = 0;
    pub const SEC_MUL: u16 = 1;
    pub const SEC_MAT_MUL: u16 = 2;
    pub const SEC_CMP: u16 = 3;
    pub const SEC_RELU: u16 = 4;
    pub const SEC_MAXPOOL: u16 = 5;
    pub const SEC_DIV: u16 = 6;
    pub const SEC_MAT_INV: u16 = 7;
    pub const SEC_SORT: u16 = 8;
    pub const SEC_PCA: u16 = 9;
    pub const KMEANS: u16 = 10;
    pub const HKM_BUILD: u16 = 11;
    pub const HKM_QUERY: u16 = 12;
    pub const C2LSH_BUILD: u16 = 13;
    pub const C2LSH_QUERY: u16 = 14;
    pub const NORMALIZE: u16 = 15;
    pub const HANDSHAKE: u16 = 16;
    pub const COMPRESS_QUERY: u16 = 17;
    pub const FETCH: u16 = 18;
    pub const LINEAR_SCAN: u16 = 19;

    pub const ALL: &[(u16, &str)] = &[
        (CONTROL, "control"),
        (SEC_MUL, "sec_mul"),
        (SEC_MAT_MUL, "sec_mat_mul"),
        (SEC_CMP, "sec_cmp"),
        (SEC_RELU, "sec_relu"),
        (SEC_MAXPOOL, "sec_maxpool"),
        (SEC_DIV, "sec_div"),
        (SEC_MAT_INV, "sec_mat_inv"),
        (SEC_SORT, "sec_sort"),
        (SEC_PCA, "sec_pca"),
        (KMEANS, "kmeans"),
        (HKM_BUILD, "hkm_build"),
        (HKM_QUERY, "hkm_query"),
        (C2LSH_BUILD, "c2lsh_build"),
        (C2LSH_QUERY, "c2lsh_query"),
        (NORMALIZE, "normalize"),
        (HANDSHAKE, "handshake"),
        (COMPRESS_QUERY, "compress_query"),
        (FETCH, "fetch"),
        (LINEAR_SCAN, "linear_scan"),
    ];

    pub fn name(t: u16) -> &'static str {
        ALL.iter()
            .find(|(k, _)| *k == t)
            .map(|(_, n)| *n)
            .unwrap_or("unknown")
    }
}

/// Run `f` with `t` pushed on the session's tag stack.
pub fn scoped<T>(p: &mut Party, t: u16, f: impl FnOnce(&mut Party) -> Result<T>) -> Result<T> {
    p.session.push_tag(t);
    let out = f(p);
    p.session.pop_tag();
    out
}

enum Job {
    Elem { x: Vec<Fx>, y: Vec<Fx> },
    Mat { x: DMatrix<Fx>, y: DMatrix<Fx> },
}

enum Prod {
    Elem(Vec<Fx>),
    Mat(DMatrix<Fx>),
}

#[derive(Debug, Clone, Copy)]
pub struct MulHandle(usize);

#[derive(Debug, Clone, Copy)]
pub struct RevealHandle(usize);

/// Independent multiplications and reveals that share one exchange.
#[derive(Default)]
pub struct MulRound {
    jobs: Vec<Job>,
    reveals: Vec<(Vec<Fx>, &'static str, &'static str)>,
}

pub struct RoundOut {
    prods: Vec<Prod>,
    revealed: Vec<Vec<Fx>>,
}

impl RoundOut {
    pub fn vec(&mut self, h: MulHandle) -> Vec<Fx> {
        match std::mem::replace(&mut self.prods[h.0], Prod::Elem(Vec::new())) {
            Prod::Elem(v) => v,
            Prod::Mat(m) => m.as_slice().to_vec(),
        }
    }

    pub fn mat(&mut self, h: MulHandle) -> DMatrix<Fx> {
        match std::mem::replace(&mut self.prods[h.0], Prod::Elem(Vec::new())) {
            Prod::Mat(m) => m,
            Prod::Elem(v) => DMatrix::from_vec(v.len(), 1, v),
        }
    }

    pub fn revealed(&mut self, h: RevealHandle) -> Vec<Fx> {
        std::mem::take(&mut self.revealed[h.0])
    }
}

impl MulRound {
    pub fn new() -> Self {
        Self::default()
    }

    /// Elementwise product of two equally long share vectors.
    pub fn elem(&mut self, x: Vec<Fx>, y: Vec<Fx>) -> MulHandle {
        self.jobs.push(Job::Elem { x, y });
        MulHandle(self.jobs.len() - 1)
    }

    /// Matrix product `x·y`.
    pub fn mat(&mut self, x: DMatrix<Fx>, y: DMatrix<Fx>) -> MulHandle {
        self.jobs.push(Job::Mat { x, y });
        MulHandle(self.jobs.len() - 1)
    }

    /// Open `v` to both parties in the same exchange.
    pub fn reveal(&mut self, v: Vec<Fx>, protocol: &'static str, label: &'static str) -> RevealHandle {
        self.reveals.push((v, protocol, label));
        RevealHandle(self.reveals.len() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty() && self.reveals.is_empty()
    }

    pub fn run(self, p: &mut Party) -> Result<RoundOut> {
        let cfg = p.cfg;
        let t = |v: &mut [Fx]| crate::numeric::truncate_slice(v, &cfg);

        // local half of every masked opening, in job order
        let mut msg: Vec<Fx> = Vec::new();
        let mut prepared = Vec::with_capacity(self.jobs.len());
        for job in self.jobs {
            match job {
                Job::Elem { mut x, mut y } => {
                    if x.len() != y.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "elementwise {} vs {}",
                            x.len(),
                            y.len()
                        )));
                    }
                    t(&mut x);
                    t(&mut y);
                    let tr = p.material.take_scalars(x.len())?;
                    let off = msg.len();
                    msg.extend(x.iter().zip(&tr.a).map(|(x, a)| x - a));
                    msg.extend(y.iter().zip(&tr.b).map(|(y, b)| y - b));
                    prepared.push((off, Prepared::Elem { x, y, c: tr.c }));
                }
                Job::Mat { mut x, mut y } => {
                    if x.ncols() != y.nrows() {
                        return Err(Error::ShapeMismatch(format!(
                            "{:?} · {:?}",
                            x.shape(),
                            y.shape()
                        )));
                    }
                    t(x.as_mut_slice());
                    t(y.as_mut_slice());
                    let shape: Shape = (x.nrows(), x.ncols(), y.ncols());
                    let tr = p.material.take_matrix(shape)?;
                    let off = msg.len();
                    msg.extend((&x - &tr.a).iter());
                    msg.extend((&y - &tr.b).iter());
                    prepared.push((off, Prepared::Mat { x, y, c: tr.c }));
                }
            }
        }
        let mut reveal_at = Vec::with_capacity(self.reveals.len());
        for (v, _, _) in &self.reveals {
            reveal_at.push((msg.len(), v.len()));
            msg.extend(v.iter().map(|&x| truncate(x, &cfg)));
        }

        let theirs = decode_f64s(&p.session.exchange(encode_f64s(&msg))?)?;
        if theirs.len() != msg.len() {
            return Err(Error::ProtocolViolation(format!(
                "expected {} values, peer sent {}",
                msg.len(),
                theirs.len()
            )));
        }
        let open = |off: usize, n: usize| -> Vec<Fx> {
            msg[off..off + n]
                .iter()
                .zip(&theirs[off..off + n])
                .map(|(a, b)| a + b)
                .collect()
        };

        let first = p.is_first();
        let mut prods = Vec::with_capacity(prepared.len());
        for (off, job) in prepared {
            match job {
                Prepared::Elem { x, y, c } => {
                    let n = x.len();
                    let e = open(off, n);
                    let f = open(off + n, n);
                    let z = parallel::map_range(n, |i| {
                        let mut z = x[i] * f[i] + e[i] * y[i] + c[i];
                        if !first {
                            z -= e[i] * f[i];
                        }
                        z
                    });
                    prods.push(Prod::Elem(z));
                }
                Prepared::Mat { x, y, c } => {
                    let (na, nb) = (x.len(), y.len());
                    let e = DMatrix::from_vec(x.nrows(), x.ncols(), open(off, na));
                    let f = DMatrix::from_vec(y.nrows(), y.ncols(), open(off + na, nb));
                    let mut z = &x * &f + &e * &y + c;
                    if !first {
                        z -= &e * &f;
                    }
                    prods.push(Prod::Mat(z));
                }
            }
        }
        let mut revealed = Vec::with_capacity(reveal_at.len());
        for ((off, n), (_, proto, label)) in reveal_at.into_iter().zip(&self.reveals) {
            let v = open(off, n);
            p.note_reveal(proto, label, &v);
            revealed.push(v);
        }
        Ok(RoundOut { prods, revealed })
    }
}

enum Prepared {
    Elem { x: Vec<Fx>, y: Vec<Fx>, c: Vec<Fx> },
    Mat { x: DMatrix<Fx>, y: DMatrix<Fx>, c: DMatrix<Fx> },
}

/// Open shares to both parties. One round.
pub fn reveal(p: &mut Party, v: &[Fx], protocol: &'static str, label: &'static str) -> Result<Vec<Fx>> {
    let mut r = MulRound::new();
    let h = r.reveal(v.to_vec(), protocol, label);
    Ok(r.run(p)?.revealed(h))
}

/// Open shares whose sum is known to lie on the grid. The shares go out at
/// full carrier precision and the sum is snapped back onto the grid, so the
/// opened value carries no share rounding. One round.
pub fn reveal_on_grid(p: &mut Party, v: &[Fx], protocol: &'static str, label: &'static str) -> Result<Vec<Fx>> {
    let theirs = decode_f64s(&p.session.exchange(encode_f64s(v))?)?;
    if theirs.len() != v.len() {
        return Err(Error::ProtocolViolation("reveal length".into()));
    }
    let cfg = p.cfg;
    let out: Vec<Fx> = v.iter().zip(&theirs).map(|(a, b)| truncate(a + b, &cfg)).collect();
    p.note_reveal(protocol, label, &out);
    Ok(out)
}

/// Open shares to one party only. The sender passes `Some(share)`, the
/// receiver `None`; only the receiver gets the value back. One round.
pub fn reveal_to(
    p: &mut Party,
    share: &[Fx],
    receiver_is_first: bool,
    protocol: &'static str,
    label: &'static str,
) -> Result<Option<Vec<Fx>>> {
    let cfg = p.cfg;
    let mine: Vec<Fx> = share.iter().map(|&x| truncate(x, &cfg)).collect();
    if p.is_first() == receiver_is_first {
        let theirs = decode_f64s(&p.session.recv_only()?)?;
        if theirs.len() != mine.len() {
            return Err(Error::ProtocolViolation("reveal length".into()));
        }
        let v: Vec<Fx> = mine.iter().zip(&theirs).map(|(a, b)| a + b).collect();
        p.note_reveal(protocol, label, &v);
        Ok(Some(v))
    } else {
        p.session.send_only(encode_f64s(&mine))?;
        Ok(None)
    }
}

/// Send public values to the peer (`Some`) or receive them (`None`). One round.
pub fn send_public(p: &mut Party, sender_is_first: bool, values: Option<&[Fx]>) -> Result<Vec<Fx>> {
    if p.is_first() == sender_is_first {
        let v = values.ok_or_else(|| Error::ProtocolViolation("sender has no values".into()))?;
        p.session.send_only(encode_f64s(v))?;
        Ok(v.to_vec())
    } else {
        decode_f64s(&p.session.recv_only()?)
    }
}

pub fn sec_mul_vec(p: &mut Party, x: &[Fx], y: &[Fx]) -> Result<Vec<Fx>> {
    scoped(p, tag::SEC_MUL, |p| {
        let mut r = MulRound::new();
        let h = r.elem(x.to_vec(), y.to_vec());
        Ok(r.run(p)?.vec(h))
    })
}

pub fn sec_mul(p: &mut Party, x: Share, y: Share) -> Result<Share> {
    Ok(Share::new(p.id, sec_mul_vec(p, &[x.value], &[y.value])?[0]))
}

pub fn sec_mat_mul_raw(p: &mut Party, x: &DMatrix<Fx>, y: &DMatrix<Fx>) -> Result<DMatrix<Fx>> {
    scoped(p, tag::SEC_MAT_MUL, |p| {
        let mut r = MulRound::new();
        let h = r.mat(x.clone(), y.clone());
        Ok(r.run(p)?.mat(h))
    })
}

pub fn sec_mat_mul(p: &mut Party, x: &ShareMatrix, y: &ShareMatrix) -> Result<ShareMatrix> {
    Ok(ShareMatrix::new(p.id, sec_mat_mul_raw(p, &x.values, &y.values)?))
}

/// Sign-indicator shares of `d` (1 if positive, else 0). Two rounds.
fn cmp_core(p: &mut Party, d: &[Fx]) -> Result<Vec<Fx>> {
    let n = d.len();
    let tup = p.material.take_cmp(n)?;
    let mut r = MulRound::new();
    let h = r.elem(d.to_vec(), tup.r.clone());
    let z = r.run(p)?.vec(h);
    let masked: Vec<Fx> = z.iter().zip(&tup.k).map(|(z, k)| z + k).collect();
    let f = reveal(p, &masked, "sec_cmp", "f")?;
    let one = p.one();
    Ok(f.iter()
        .zip(&tup.sgn)
        .map(|(&f, &s)| if f > 0.0 { s } else { one - s })
        .collect())
}

/// Batched comparison: shares of `[u_l > v_l]`.
pub fn sec_cmp_vec(p: &mut Party, u: &[Fx], v: &[Fx]) -> Result<Vec<Fx>> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), v.len())));
    }
    let d: Vec<Fx> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    scoped(p, tag::SEC_CMP, |p| cmp_core(p, &d))
}

pub fn sec_cmp(p: &mut Party, u: Share, v: Share) -> Result<Share> {
    Ok(Share::new(p.id, sec_cmp_vec(p, &[u.value], &[v.value])?[0]))
}

/// Batched ReLU. Three rounds.
pub fn sec_relu(p: &mut Party, x: &[Fx]) -> Result<Vec<Fx>> {
    scoped(p, tag::SEC_RELU, |p| {
        let s = cmp_core(p, x)?;
        let mut r = MulRound::new();
        let h = r.elem(s, x.to_vec());
        Ok(r.run(p)?.vec(h))
    })
}

/// `s·(a − b) + b`: picks `a` where the sign share is 1.
fn select(p: &mut Party, s: Vec<Fx>, a: &[Fx], b: &[Fx]) -> Result<Vec<Fx>> {
    let d: Vec<Fx> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    let mut r = MulRound::new();
    let h = r.elem(s, d);
    let z = r.run(p)?.vec(h);
    Ok(z.iter().zip(b).map(|(z, b)| z + b).collect())
}

/// Batched 2×2 max over blocks `(x1, x2, x3, x4)`. Six rounds.
pub fn sec_maxpool4(p: &mut Party, blocks: &[[Fx; 4]]) -> Result<Vec<Fx>> {
    scoped(p, tag::SEC_MAXPOOL, |p| {
        let n = blocks.len();
        let col = |k: usize| blocks.iter().map(|b| b[k]).collect::<Vec<_>>();
        let (x1, x2, x3, x4) = (col(0), col(1), col(2), col(3));
        // both first-stage comparisons share their rounds
        let mut d = Vec::with_capacity(2 * n);
        d.extend(x1.iter().zip(&x2).map(|(a, b)| a - b));
        d.extend(x3.iter().zip(&x4).map(|(a, b)| a - b));
        let s = cmp_core(p, &d)?;
        let mut a = x1;
        a.extend(x3);
        let mut b = x2;
        b.extend(x4);
        let m = select(p, s, &a, &b)?;
        let (m12, m34) = m.split_at(n);
        let d2: Vec<Fx> = m12.iter().zip(m34).map(|(a, b)| a - b).collect();
        let s2 = cmp_core(p, &d2)?;
        select(p, s2, m12, m34)
    })
}

/// 2×2 max via one sort per block. Two rounds, but leaks the in-block order.
pub fn sec_maxpool4_sort(p: &mut Party, blocks: &[[Fx; 4]]) -> Result<Vec<Fx>> {
    scoped(p, tag::SEC_MAXPOOL, |p| {
        let arrays: Vec<Vec<Fx>> = blocks.iter().map(|b| b.to_vec()).collect();
        let perms = sort_core(p, &arrays)?;
        Ok(perms
            .iter()
            .zip(blocks)
            .map(|(perm, b)| b[perm[3]])
            .collect())
    })
}

/// Batched division `u/v`. Two rounds.
///
/// Each party draws its own integer mask share: P1 odd, P2 even, so the
/// combined mask `r` is never zero and `g = v·r` stays on the grid.
pub fn sec_div_vec(p: &mut Party, u: &[Fx], v: &[Fx]) -> Result<Vec<Fx>> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), v.len())));
    }
    scoped(p, tag::SEC_DIV, |p| {
        let n = u.len();
        let first = p.is_first();
        let r: Vec<Fx> = (0..n)
            .map(|_| {
                let m: i64 = p.rng().gen_range(1..=64);
                let m = if first { 2 * m - 1 } else { 2 * m };
                let s = if p.rng().gen::<bool>() { 1 } else { -1 };
                (s * m) as Fx
            })
            .collect();
        let mut round = MulRound::new();
        let hf = round.elem(u.to_vec(), r.clone());
        let hg = round.elem(v.to_vec(), r);
        let mut out = round.run(p)?;
        let f = out.vec(hf);
        let g = reveal_on_grid(p, &out.vec(hg), "sec_div", "g")?;
        if g.iter().any(|g| g.abs() <= p.cfg.share_lower()) {
            return Err(Error::DivisorMaskedZero);
        }
        Ok(f.iter().zip(&g).map(|(f, g)| f / g).collect())
    })
}

pub fn sec_div(p: &mut Party, u: Share, v: Share) -> Result<Share> {
    Ok(Share::new(p.id, sec_div_vec(p, &[u.value], &[v.value])?[0]))
}

pub const MAT_INV_RETRIES: usize = 3;
pub const MAX_CONDITION: f64 = 1e6;

/// Condition number of a revealed mask product; `None` if singular.
pub fn condition(w: &DMatrix<Fx>) -> Option<f64> {
    let sv = w.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || max == 0.0 {
        None
    } else {
        Some(max / min)
    }
}

/// Small nonzero integer mask entries in `[-8, 8]`.
pub fn integer_mask(p: &mut Party, n: usize, m: usize) -> DMatrix<Fx> {
    DMatrix::from_fn(n, m, |_, _| {
        let v: i32 = p.rng().gen_range(1..=8);
        if p.rng().gen::<bool>() {
            v as Fx
        } else {
            -v as Fx
        }
    })
}

/// Reveal `W = Z·X` and return `W^{-1}` together with this party's `Z_i`.
/// Two rounds per attempt.
pub(crate) fn masked_inverse(p: &mut Party, x: &DMatrix<Fx>) -> Result<(DMatrix<Fx>, DMatrix<Fx>)> {
    let n = x.nrows();
    for _ in 0..=MAT_INV_RETRIES {
        let z = integer_mask(p, n, n);
        let mut r = MulRound::new();
        let h = r.mat(z.clone(), x.clone());
        let w_share = r.run(p)?.mat(h);
        // integer Z times grid X is on the grid
        let w = DMatrix::from_vec(n, n, reveal_on_grid(p, w_share.as_slice(), "sec_mat_inv", "W")?);
        match condition(&w) {
            Some(c) if c <= MAX_CONDITION => {
                let inv = w.try_inverse().ok_or(Error::SingularW)?;
                return Ok((inv, z));
            }
            _ => continue,
        }
    }
    Err(Error::SingularInput)
}

/// Shares of `X^{-1}`. Two rounds when the first mask is usable.
pub fn sec_mat_inv_raw(p: &mut Party, x: &DMatrix<Fx>) -> Result<DMatrix<Fx>> {
    if !x.is_square() {
        return Err(Error::ShapeMismatch(format!("{:?} is not square", x.shape())));
    }
    scoped(p, tag::SEC_MAT_INV, |p| {
        let (inv, z) = masked_inverse(p, x)?;
        Ok(inv * z)
    })
}

pub fn sec_mat_inv(p: &mut Party, x: &ShareMatrix) -> Result<ShareMatrix> {
    Ok(ShareMatrix::new(p.id, sec_mat_inv_raw(p, &x.values)?))
}

/// Stable ascending order of `f`; ties go to the lower index.
pub fn argsort(f: &[Fx]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.len()).collect();
    idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
    idx
}

/// Ascending permutations of several arrays, one sort tuple each, two rounds.
fn sort_core(p: &mut Party, arrays: &[Vec<Fx>]) -> Result<Vec<Vec<usize>>> {
    let mut tuples = Vec::with_capacity(arrays.len());
    let mut t = Vec::new();
    let mut u = Vec::new();
    for a in arrays {
        let tu = p.material.take_sort()?;
        t.extend(std::iter::repeat(tu.t).take(a.len()));
        u.extend_from_slice(a);
        tuples.push(tu);
    }
    let mut r = MulRound::new();
    let h = r.elem(t, u);
    let z = r.run(p)?.vec(h);
    let mut masked = Vec::with_capacity(z.len());
    let mut off = 0;
    for (a, tu) in arrays.iter().zip(&tuples) {
        masked.extend(z[off..off + a.len()].iter().map(|z| z + tu.k));
        off += a.len();
    }
    let f = reveal(p, &masked, "sec_sort", "f")?;
    let mut out = Vec::with_capacity(arrays.len());
    let mut off = 0;
    for a in arrays {
        out.push(argsort(&f[off..off + a.len()]));
        off += a.len();
    }
    Ok(out)
}

/// Ascending permutations of independent arrays in one pair of rounds.
pub fn sec_sort_many(p: &mut Party, arrays: &[Vec<Fx>]) -> Result<Vec<Vec<usize>>> {
    scoped(p, tag::SEC_SORT, |p| sort_core(p, arrays))
}

/// Ascending permutation of `u` and the permuted shares. Two rounds.
pub fn sec_sort(p: &mut Party, u: &[Fx]) -> Result<(Vec<usize>, Vec<Fx>)> {
    let perm = sec_sort_many(p, &[u.to_vec()])?.remove(0);
    let sorted = perm.iter().map(|&i| u[i]).collect();
    Ok((perm, sorted))
}

/// Material demand of each protocol, for provisioning.
pub mod demand {
    use super::*;

    pub fn mul(plan: &mut MaterialPlan, n: usize) {
        plan.scalars(n as u64);
    }

    pub fn mat_mul(plan: &mut MaterialPlan, shape: Shape) {
        plan.triples(shape, 1);
    }

    pub fn cmp(plan: &mut MaterialPlan, n: usize) {
        plan.cmps(n as u64).scalars(n as u64);
    }

    pub fn relu(plan: &mut MaterialPlan, n: usize) {
        plan.cmps(n as u64).scalars(2 * n as u64);
    }

    pub fn maxpool4(plan: &mut MaterialPlan, blocks: usize) {
        plan.cmps(3 * blocks as u64).scalars(6 * blocks as u64);
    }

    pub fn maxpool4_sort(plan: &mut MaterialPlan, blocks: usize) {
        plan.sorts(blocks as u64).scalars(4 * blocks as u64);
    }

    pub fn div(plan: &mut MaterialPlan, n: usize) {
        plan.scalars(2 * n as u64);
    }

    pub fn mat_inv(plan: &mut MaterialPlan, n: usize) {
        plan.triples((n, n, n), 1);
    }

    pub fn sort(plan: &mut MaterialPlan, len: usize) {
        plan.sorts(1).scalars(len as u64);
    }
}
