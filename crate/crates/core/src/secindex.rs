//! Index construction and search over shared feature vectors: k-means,
//! hierarchical k-means trees and C2LSH tables.
//!
//! Every algorithm here is written against [`Compute`], so the same code
//! drives the two-party run (on a [`Party`]) and the plaintext oracle (on
//! [`Plain`]). Public decisions therefore come from identical logic.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha20Rng;

use crate::dealer::MaterialPlan;
use crate::error::{Error, Result};
use crate::numeric::{truncate, FixedPointConfig, Fx};
use crate::party::{sub_rng, Party};
use crate::protocols::{self, argsort, scoped, send_public, tag, MulRound};

/// The operations index code needs from its arithmetic backend.
pub trait Compute {
    /// Squared Euclidean distance of every `(u, v)` pair. One round.
    fn sq_distances(&mut self, pairs: &[(&[Fx], &[Fx])]) -> Result<Vec<Fx>>;
    /// Ascending permutation of each array. Only the first `used` ranks of
    /// each are acted on. Two rounds.
    fn argsort_many(&mut self, arrays: &[Vec<Fx>], used: usize) -> Result<Vec<Vec<usize>>>;
    /// Whether this side makes the choices the other side is told about.
    fn leads(&self) -> bool;
    /// Publish the leader's indices. One flight.
    fn announce(&mut self, ids: Option<Vec<usize>>) -> Result<Vec<usize>>;
    /// `a · oᵀ`. One round.
    fn project(&mut self, a: &DMatrix<Fx>, o: &DMatrix<Fx>) -> Result<DMatrix<Fx>>;
    /// Open hash values (bucketed by width `w`) to both sides. One round.
    fn open_hashes(&mut self, h: &[Fx], w: Fx) -> Result<Vec<Fx>>;
    /// Run `f` under a protocol tag (metering only).
    fn tagged<T>(&mut self, t: u16, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T>;
}

impl Compute for Party {
    fn sq_distances(&mut self, pairs: &[(&[Fx], &[Fx])]) -> Result<Vec<Fx>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        scoped(self, tag::SEC_MAT_MUL, |p| {
            let mut r = MulRound::new();
            let mut hs = Vec::with_capacity(pairs.len());
            for (u, v) in pairs {
                if u.len() != v.len() {
                    return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), v.len())));
                }
                let diff: Vec<Fx> = u.iter().zip(*v).map(|(a, b)| a - b).collect();
                let row = DMatrix::from_row_slice(1, diff.len(), &diff);
                let col = DMatrix::from_vec(diff.len(), 1, diff);
                hs.push(r.mat(row, col));
            }
            let mut o = r.run(p)?;
            Ok(hs.into_iter().map(|h| o.mat(h)[0]).collect())
        })
    }

    fn argsort_many(&mut self, arrays: &[Vec<Fx>], _used: usize) -> Result<Vec<Vec<usize>>> {
        if arrays.is_empty() {
            return Ok(Vec::new());
        }
        protocols::sec_sort_many(self, arrays)
    }

    fn leads(&self) -> bool {
        self.is_first()
    }

    fn announce(&mut self, ids: Option<Vec<usize>>) -> Result<Vec<usize>> {
        let vals: Option<Vec<Fx>> = ids.map(|v| v.into_iter().map(|i| i as Fx).collect());
        let got = send_public(self, true, vals.as_deref())?;
        got.into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::ProtocolViolation(format!("bad index {v}")))
                }
            })
            .collect()
    }

    fn project(&mut self, a: &DMatrix<Fx>, o: &DMatrix<Fx>) -> Result<DMatrix<Fx>> {
        protocols::sec_mat_mul_raw(self, a, &o.transpose())
    }

    fn open_hashes(&mut self, h: &[Fx], _w: Fx) -> Result<Vec<Fx>> {
        protocols::reveal(self, h, "c2lsh", "h'")
    }

    fn tagged<T>(&mut self, t: u16, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        scoped(self, t, f)
    }
}

/// Plaintext backend for the oracle. It also tracks how close the run came
/// to a decision that masking noise or rounding could flip.
#[derive(Debug, Clone, Copy)]
pub struct Plain {
    /// Smallest gap between adjacent sorted values among the used ranks.
    pub min_gap: Fx,
    /// Smallest distance of an opened hash from a bucket boundary.
    pub min_boundary: Fx,
}

impl Default for Plain {
    fn default() -> Self {
        Plain {
            min_gap: Fx::INFINITY,
            min_boundary: Fx::INFINITY,
        }
    }
}

impl Plain {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Compute for Plain {
    fn sq_distances(&mut self, pairs: &[(&[Fx], &[Fx])]) -> Result<Vec<Fx>> {
        pairs
            .iter()
            .map(|(u, v)| {
                if u.len() != v.len() {
                    return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), v.len())));
                }
                Ok(u.iter().zip(*v).map(|(a, b)| (a - b) * (a - b)).sum())
            })
            .collect()
    }

    fn argsort_many(&mut self, arrays: &[Vec<Fx>], used: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(arrays.len());
        for a in arrays {
            let perm = argsort(a);
            for i in 0..used.min(a.len().saturating_sub(1)) {
                self.min_gap = self.min_gap.min(a[perm[i + 1]] - a[perm[i]]);
            }
            out.push(perm);
        }
        Ok(out)
    }

    fn leads(&self) -> bool {
        true
    }

    fn announce(&mut self, ids: Option<Vec<usize>>) -> Result<Vec<usize>> {
        ids.ok_or_else(|| Error::ProtocolViolation("plain backend always leads".into()))
    }

    fn project(&mut self, a: &DMatrix<Fx>, o: &DMatrix<Fx>) -> Result<DMatrix<Fx>> {
        if a.ncols() != o.ncols() {
            return Err(Error::ShapeMismatch(format!("{:?} · {:?}ᵀ", a.shape(), o.shape())));
        }
        Ok(a * o.transpose())
    }

    fn open_hashes(&mut self, h: &[Fx], w: Fx) -> Result<Vec<Fx>> {
        for &v in h {
            let f = (v / w).rem_euclid(1.0);
            self.min_boundary = self.min_boundary.min(f.min(1.0 - f) * w);
        }
        Ok(h.to_vec())
    }

    fn tagged<T>(&mut self, _t: u16, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        f(self)
    }
}

fn mean_of(data: &[Vec<Fx>], ids: impl Iterator<Item = usize>) -> Vec<Fx> {
    let mut sum: Vec<Fx> = Vec::new();
    let mut n = 0usize;
    for i in ids {
        if sum.is_empty() {
            sum = vec![0.0; data[i].len()];
        }
        for (s, v) in sum.iter_mut().zip(&data[i]) {
            *s += v;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n.max(1) as Fx);
    sum
}

/// Result of clustering one group of points.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    /// Initial centroid members, as indices into `data`.
    pub init: Vec<usize>,
    pub centroids: Vec<Vec<Fx>>,
    /// Cluster of each member, in member order.
    pub assign: Vec<usize>,
    pub iterations: usize,
    /// Assignment after every iteration.
    pub history: Vec<Vec<usize>>,
}

/// Cluster several independent groups at once; every iteration batches the
/// distance round and the sort rounds of all still-active groups.
///
/// `groups[g]` lists indices into `data`. Each group gets `min(k, len)`
/// clusters, initialised from members drawn by the leader with `rng`.
pub fn kmeans_many<C: Compute>(
    c: &mut C,
    data: &[Vec<Fx>],
    groups: &[Vec<usize>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<KMeansOutcome>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= data.len()) {
        return Err(Error::ShapeMismatch(format!("point {bad} of {}", data.len())));
    }
    c.tagged(tag::KMEANS, |c| {
        let ks: Vec<usize> = groups.iter().map(|g| k.min(g.len())).collect();
        let drawn = c.leads().then(|| {
            groups
                .iter()
                .zip(&ks)
                .flat_map(|(g, &kk)| sample(rng, g.len(), kk).into_iter().map(|j| g[j]).collect::<Vec<_>>())
                .collect::<Vec<usize>>()
        });
        let init_flat = c.announce(drawn)?;
        if init_flat.len() != ks.iter().sum::<usize>() {
            return Err(Error::ProtocolViolation("initial centroid count".into()));
        }
        let mut out = Vec::with_capacity(groups.len());
        let mut off = 0;
        for (g, &kk) in groups.iter().zip(&ks) {
            let init = init_flat[off..off + kk].to_vec();
            off += kk;
            out.push(KMeansOutcome {
                centroids: init.iter().map(|&i| data[i].clone()).collect(),
                init,
                assign: vec![usize::MAX; g.len()],
                iterations: 0,
                history: Vec::new(),
            });
        }

        let mut active: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
        for _ in 0..max_iters {
            if active.is_empty() {
                break;
            }
            let mut pairs = Vec::new();
            for &g in &active {
                for &i in &groups[g] {
                    for cen in &out[g].centroids {
                        pairs.push((data[i].as_slice(), cen.as_slice()));
                    }
                }
            }
            let dist = c.sq_distances(&pairs)?;
            let mut arrays = Vec::new();
            let mut off = 0;
            for &g in &active {
                let kk = out[g].centroids.len();
                for _ in &groups[g] {
                    arrays.push(dist[off..off + kk].to_vec());
                    off += kk;
                }
            }
            let perms = c.argsort_many(&arrays, 1)?;

            let mut next: Vec<Vec<usize>> = Vec::with_capacity(active.len());
            let mut pi = 0;
            for &g in &active {
                next.push(perms[pi..pi + groups[g].len()].iter().map(|p| p[0]).collect());
                pi += groups[g].len();
            }

            // groups with an empty cluster reseed it from their farthest points
            let mut far_arrays = Vec::new();
            let mut far_groups = Vec::new();
            let mut ai = 0;
            for (slot, &g) in active.iter().enumerate() {
                let kk = out[g].centroids.len();
                let mut counts = vec![0usize; kk];
                for &a in &next[slot] {
                    counts[a] += 1;
                }
                if counts.contains(&0) {
                    let own: Vec<Fx> = next[slot]
                        .iter()
                        .enumerate()
                        .map(|(m, &a)| arrays[ai + m][a])
                        .collect();
                    far_arrays.push(own);
                    far_groups.push(slot);
                }
                ai += groups[g].len();
            }
            let far_perms = c.argsort_many(&far_arrays, usize::MAX)?;
            for (slot, perm) in far_groups.iter().zip(far_perms) {
                let asg = &mut next[*slot];
                let kk = out[active[*slot]].centroids.len();
                let mut counts = vec![0usize; kk];
                for &a in asg.iter() {
                    counts[a] += 1;
                }
                let mut donors = perm.iter().rev();
                for j in 0..kk {
                    if counts[j] > 0 {
                        continue;
                    }
                    for &m in donors.by_ref() {
                        if counts[asg[m]] > 1 {
                            counts[asg[m]] -= 1;
                            asg[m] = j;
                            counts[j] = 1;
                            break;
                        }
                    }
                }
            }

            let mut still = Vec::with_capacity(active.len());
            for (slot, &g) in active.iter().enumerate() {
                let o = &mut out[g];
                let asg = std::mem::take(&mut next[slot]);
                let kk = o.centroids.len();
                let converged = asg == o.assign;
                for j in 0..kk {
                    let members = groups[g].iter().zip(&asg).filter(|(_, &a)| a == j).map(|(&i, _)| i);
                    o.centroids[j] = mean_of(data, members);
                }
                o.iterations += 1;
                o.history.push(asg.clone());
                o.assign = asg;
                if !converged {
                    still.push(g);
                }
            }
            active = still;
        }
        Ok(out)
    })
}

/// One group, as [`kmeans_many`].
pub fn kmeans<C: Compute>(
    c: &mut C,
    data: &[Vec<Fx>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha20Rng,
) -> Result<KMeansOutcome> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(kmeans_many(c, data, &[all], k, max_iters, rng)?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HkmParams {
    pub k: usize,
    pub leaf_max: usize,
    pub max_iters: usize,
    /// Public seed for initial centroid choices.
    pub seed: u64,
}

/// A tree node. Topology and ids are public; centroids are shares.
#[derive(Debug, Clone, PartialEq)]
pub struct HkmNode {
    pub centroid: Vec<Fx>,
    pub children: Vec<HkmNode>,
    /// Leaf members (empty on internal nodes).
    pub ids: Vec<u32>,
}

impl HkmNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(HkmNode::leaf_count).sum()
        }
    }

    /// Internal nodes and their child counts, preorder.
    pub fn fanouts(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            if !n.is_leaf() {
                out.push(n.children.len());
                stack.extend(n.children.iter().rev());
            }
        }
        out
    }

    /// Topology with centroids dropped, for comparing two trees.
    pub fn shape(&self) -> String {
        if self.is_leaf() {
            format!("{:?}", self.ids)
        } else {
            let inner: Vec<String> = self.children.iter().map(HkmNode::shape).collect();
            format!("({})", inner.join(" "))
        }
    }
}

struct Building {
    centroid: Vec<Fx>,
    ids: Vec<usize>,
    children: Vec<usize>,
}

/// Split level by level until every leaf holds at most `leaf_max` ids. All
/// nodes of one level are clustered in one batched k-means.
pub fn hkm_build<C: Compute>(c: &mut C, data: &[Vec<Fx>], params: &HkmParams) -> Result<HkmNode> {
    if params.leaf_max == 0 || params.k < 2 {
        return Err(Error::Config("hkm needs leaf_max >= 1 and k >= 2".into()));
    }
    c.tagged(tag::HKM_BUILD, |c| {
        let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
        let all: Vec<usize> = (0..data.len()).collect();
        let mut nodes = vec![Building {
            centroid: mean_of(data, all.iter().copied()),
            ids: all,
            children: Vec::new(),
        }];
        let mut frontier = vec![0usize];
        loop {
            let split: Vec<usize> = frontier
                .iter()
                .copied()
                .filter(|&n| nodes[n].ids.len() > params.leaf_max)
                .collect();
            if split.is_empty() {
                break;
            }
            let groups: Vec<Vec<usize>> = split.iter().map(|&n| nodes[n].ids.clone()).collect();
            let outs = kmeans_many(c, data, &groups, params.k, params.max_iters, &mut rng)?;
            let mut next = Vec::new();
            for (&n, o) in split.iter().zip(outs) {
                let members = nodes[n].ids.clone();
                let parts: Vec<(usize, Vec<usize>)> = (0..o.centroids.len())
                    .map(|j| {
                        let ids: Vec<usize> = members
                            .iter()
                            .zip(&o.assign)
                            .filter(|(_, &a)| a == j)
                            .map(|(&i, _)| i)
                            .collect();
                        (j, ids)
                    })
                    .filter(|(_, ids)| !ids.is_empty())
                    .collect();
                // a split that separates nothing would recurse forever
                if parts.len() < 2 {
                    continue;
                }
                for (j, ids) in parts {
                    nodes.push(Building {
                        centroid: o.centroids[j].clone(),
                        ids,
                        children: Vec::new(),
                    });
                    let id = nodes.len() - 1;
                    nodes[n].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        Ok(freeze(&nodes, 0))
    })
}

fn freeze(nodes: &[Building], at: usize) -> HkmNode {
    let n = &nodes[at];
    HkmNode {
        centroid: n.centroid.clone(),
        children: n.children.iter().map(|&c| freeze(nodes, c)).collect(),
        ids: if n.children.is_empty() {
            n.ids.iter().map(|&i| i as u32).collect()
        } else {
            Vec::new()
        },
    }
}

/// Candidates and final ranking of one search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub candidates: Vec<u32>,
    pub top: Vec<u32>,
}

fn rank_candidates<C: Compute>(
    c: &mut C,
    data: &[Vec<Fx>],
    q: &[Fx],
    candidates: Vec<u32>,
    m: usize,
) -> Result<SearchResult> {
    let pairs: Vec<(&[Fx], &[Fx])> = candidates
        .iter()
        .map(|&i| (q, data[i as usize].as_slice()))
        .collect();
    let d = c.sq_distances(&pairs)?;
    let perm = c.argsort_many(&[d], m)?.pop().unwrap_or_default();
    let top = perm.iter().take(m).map(|&j| candidates[j]).collect();
    Ok(SearchResult { candidates, top })
}

/// Descend to the nearest leaf, queueing the other children of every node
/// passed (nearest first, ahead of older entries), until at least `3m` ids
/// are collected; then rank the candidates exactly.
pub fn hkm_query<C: Compute>(
    c: &mut C,
    root: &HkmNode,
    data: &[Vec<Fx>],
    q: &[Fx],
    m: usize,
) -> Result<SearchResult> {
    c.tagged(tag::HKM_QUERY, |c| {
        let floor = 3 * m;
        let mut pending: VecDeque<&HkmNode> = VecDeque::from([root]);
        let mut candidates: Vec<u32> = Vec::new();
        while candidates.len() < floor {
            let Some(mut cur) = pending.pop_front() else {
                break;
            };
            while !cur.is_leaf() {
                if cur.children.len() == 1 {
                    cur = &cur.children[0];
                    continue;
                }
                let pairs: Vec<(&[Fx], &[Fx])> = cur
                    .children
                    .iter()
                    .map(|ch| (q, ch.centroid.as_slice()))
                    .collect();
                let d = c.sq_distances(&pairs)?;
                let perm = c.argsort_many(&[d], usize::MAX)?.pop().unwrap_or_default();
                for &j in perm[1..].iter().rev() {
                    pending.push_front(&cur.children[j]);
                }
                cur = &cur.children[perm[0]];
            }
            candidates.extend_from_slice(&cur.ids);
        }
        rank_candidates(c, data, q, candidates, m)
    })
}

/// Rows of a matrix as owned vectors.
pub fn rows(m: &DMatrix<Fx>) -> Vec<Vec<Fx>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Rehash levels tried before every id becomes a candidate.
pub const MAX_LEVEL: u32 = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct LshParams {
    /// Number of hash functions `m_f`.
    pub functions: usize,
    pub w: Fx,
    /// Collision threshold as a fraction of `m_f`.
    pub alpha: f64,
    /// Public seed for the multipliers `x`.
    pub seed: u64,
}

impl Default for LshParams {
    fn default() -> Self {
        LshParams {
            functions: 16,
            w: 1.0,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl LshParams {
    pub fn threshold(&self) -> usize {
        ((self.alpha * self.functions as f64).ceil() as usize).clamp(1, self.functions.max(1))
    }
}

/// A hash family `h'_f(o) = a_f·o + b_f·w·x_f`, one row of `a` per function.
/// On a party, `a` and `b` are shares; `w` and `x` are public.
#[derive(Debug, Clone, PartialEq)]
pub struct LshFunctions {
    pub a: DMatrix<Fx>,
    pub b: Vec<Fx>,
    pub w: Fx,
    pub x: Vec<Fx>,
}

/// Public integer multipliers in `[1, 8]`.
pub fn public_multipliers(params: &LshParams) -> Vec<Fx> {
    let mut rng = sub_rng(params.seed, "c2lsh-x");
    (0..params.functions).map(|_| rng.gen_range(1..=8) as Fx).collect()
}

/// One party's half of the family: `a` entries drawn N(0, 1/2) so the sum
/// of both halves is N(0, 1); the leader also holds all of `b ∈ [0, w)`.
pub fn lsh_half(
    rng: &mut ChaCha20Rng,
    leader: bool,
    d: usize,
    params: &LshParams,
    cfg: &FixedPointConfig,
) -> LshFunctions {
    let normal = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
    let a = DMatrix::from_fn(params.functions, d, |_, _| truncate(normal.sample(rng), cfg));
    let b = (0..params.functions)
        .map(|_| {
            if leader {
                truncate(rng.gen_range(0.0..params.w), cfg).min(params.w - cfg.ulp())
            } else {
                0.0
            }
        })
        .collect();
    LshFunctions {
        a,
        b,
        w: params.w,
        x: public_multipliers(params),
    }
}

/// This party's half, from its dedicated stream.
pub fn lsh_for_party(p: &Party, d: usize, params: &LshParams) -> LshFunctions {
    lsh_half(&mut p.sub_rng("c2lsh"), p.is_first(), d, params, &p.cfg)
}

/// The combined family of a session with the given party seeds.
pub fn lsh_plain(
    seed1: u64,
    seed2: u64,
    d: usize,
    params: &LshParams,
    cfg: &FixedPointConfig,
) -> LshFunctions {
    let h1 = lsh_half(&mut sub_rng(seed1, "c2lsh"), true, d, params, cfg);
    let h2 = lsh_half(&mut sub_rng(seed2, "c2lsh"), false, d, params, cfg);
    LshFunctions {
        a: &h1.a + &h2.a,
        b: h1.b.iter().zip(&h2.b).map(|(x, y)| x + y).collect(),
        w: h1.w,
        x: h1.x,
    }
}

pub fn bucket(h: Fx, w: Fx) -> i64 {
    (h / w).floor() as i64
}

/// Opened `h'` values, `m_f × n` for the `n` rows of `o`. Two rounds.
pub fn lsh_hashes<C: Compute>(c: &mut C, f: &LshFunctions, o: &DMatrix<Fx>) -> Result<DMatrix<Fx>> {
    let mut h = c.project(&f.a, o)?;
    for (r, mut row) in h.row_iter_mut().enumerate() {
        row.add_scalar_mut(f.b[r] * f.w * f.x[r]);
    }
    let open = c.open_hashes(h.as_slice(), f.w)?;
    Ok(DMatrix::from_vec(h.nrows(), h.ncols(), open))
}

/// Per-function bucket tables; identical on both parties.
#[derive(Debug, Clone, PartialEq)]
pub struct LshIndex {
    pub params: LshParams,
    pub funcs: LshFunctions,
    pub tables: Vec<BTreeMap<i64, Vec<u32>>>,
    pub n: usize,
}

pub fn c2lsh_build<C: Compute>(
    c: &mut C,
    funcs: LshFunctions,
    params: &LshParams,
    data: &[Vec<Fx>],
) -> Result<LshIndex> {
    if params.functions == 0 || funcs.a.nrows() != params.functions {
        return Err(Error::Config("c2lsh needs at least one function".into()));
    }
    c.tagged(tag::C2LSH_BUILD, |c| {
        let n = data.len();
        let d = funcs.a.ncols();
        let o = DMatrix::from_fn(n, d, |i, j| data[i][j]);
        let h = lsh_hashes(c, &funcs, &o)?;
        let mut tables = vec![BTreeMap::<i64, Vec<u32>>::new(); params.functions];
        for (f, table) in tables.iter_mut().enumerate() {
            for i in 0..n {
                table.entry(bucket(h[(f, i)], funcs.w)).or_default().push(i as u32);
            }
        }
        Ok(LshIndex {
            params: params.clone(),
            funcs,
            tables,
            n,
        })
    })
}

/// Ids colliding with the query buckets `qb` in at least the threshold
/// number of tables, at the first rehash level where there are `floor` of
/// them. Ascending by id.
pub fn collision_candidates(index: &LshIndex, qb: &[i64], floor: usize) -> Vec<u32> {
    let need = floor.min(index.n);
    let threshold = index.params.threshold();
    for level in 0..=MAX_LEVEL {
        let mut counts = vec![0usize; index.n];
        for (table, &q) in index.tables.iter().zip(qb) {
            let qv = q.div_euclid(1i64 << level);
            for (&b, ids) in table {
                if b.div_euclid(1i64 << level) == qv {
                    for &i in ids {
                        counts[i as usize] += 1;
                    }
                }
            }
        }
        let cand: Vec<u32> = (0..index.n as u32).filter(|&i| counts[i as usize] >= threshold).collect();
        if cand.len() >= need {
            return cand;
        }
    }
    (0..index.n as u32).collect()
}

/// Hash the query, count collisions locally with virtual rehashing, then
/// rank the candidates exactly. Five rounds.
pub fn c2lsh_query<C: Compute>(
    c: &mut C,
    index: &LshIndex,
    data: &[Vec<Fx>],
    q: &[Fx],
    m: usize,
) -> Result<SearchResult> {
    if q.len() != index.funcs.a.ncols() || data.len() != index.n {
        return Err(Error::ShapeMismatch(format!(
            "query {} / data {} vs index {}x{}",
            q.len(),
            data.len(),
            index.n,
            index.funcs.a.ncols()
        )));
    }
    c.tagged(tag::C2LSH_QUERY, |c| {
        let qm = DMatrix::from_row_slice(1, q.len(), q);
        let h = lsh_hashes(c, &index.funcs, &qm)?;
        let qb: Vec<i64> = h.iter().map(|&v| bucket(v, index.funcs.w)).collect();
        let candidates = collision_candidates(index, &qb, 3 * m);
        rank_candidates(c, data, q, candidates, m)
    })
}

/// Material bounds for provisioning the index protocols.
pub mod demand {
    use super::*;

    /// `iters` iterations over `n` points split into `groups` groups.
    pub fn kmeans(plan: &mut MaterialPlan, n: usize, groups: usize, k: usize, d: usize, iters: usize) {
        let kk = k.min(n.max(1));
        for _ in 0..iters {
            plan.triples((1, d, 1), (n * kk) as u64)
                .sorts(n as u64)
                .scalars((n * kk) as u64);
            // reseeding sorts
            plan.sorts(groups as u64).scalars(n as u64);
        }
    }

    pub fn hkm_levels(n: usize, leaf_max: usize) -> usize {
        let ratio = (n as f64 / leaf_max.max(1) as f64).max(1.0);
        ratio.log2().ceil() as usize + 2
    }

    pub fn hkm_build(plan: &mut MaterialPlan, n: usize, d: usize, params: &HkmParams) {
        let groups = n / (params.leaf_max + 1) + 1;
        for _ in 0..hkm_levels(n, params.leaf_max) {
            kmeans(plan, n, groups, params.k, d, params.max_iters);
        }
    }

    /// Worst case for one query: every internal node expanded, every id ranked.
    pub fn hkm_query(plan: &mut MaterialPlan, root: &HkmNode, n: usize, d: usize) {
        for f in root.fanouts().into_iter().filter(|&f| f > 1) {
            plan.triples((1, d, 1), f as u64);
            protocols::demand::sort(plan, f);
        }
        plan.triples((1, d, 1), n as u64);
        protocols::demand::sort(plan, n);
    }

    /// Worst case for one query on any tree over `n` ids with fanout at
    /// most `k`, for a dealer that has not seen the tree.
    pub fn hkm_query_bound(plan: &mut MaterialPlan, n: usize, d: usize, k: usize) {
        let internal = n.saturating_sub(1).max(1);
        plan.triples((1, d, 1), (internal * k + n) as u64);
        plan.sorts(internal as u64 + 1).scalars((internal * k + n) as u64);
    }

    pub fn c2lsh_build(plan: &mut MaterialPlan, n: usize, d: usize, functions: usize) {
        plan.triples((functions, d, n), 1);
    }

    pub fn c2lsh_query(plan: &mut MaterialPlan, n: usize, d: usize, functions: usize) {
        plan.triples((functions, d, 1), 1).triples((1, d, 1), n as u64);
        protocols::demand::sort(plan, n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::split_matrix;
    use crate::testing::{party_seeds, run_pair, run_pair_with, shares_of, Pair};
    use std::collections::BTreeSet;

    fn cfg() -> FixedPointConfig {
        FixedPointConfig::default()
    }

    fn share_rows(x: &DMatrix<Fx>, seed: u64) -> Pair<Vec<Vec<Fx>>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a, b) = split_matrix(x, &mut rng, &cfg()).unwrap();
        Pair(rows(&a.values), rows(&b.values))
    }

    fn random_points(n: usize, d: usize, scale: Fx, seed: u64) -> DMatrix<Fx> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| truncate(rng.gen_range(-scale..scale), &cfg()))
    }

    fn open(a: &[Vec<Fx>], b: &[Vec<Fx>]) -> Vec<Vec<Fx>> {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.iter().zip(v).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn sq(u: &[Fx], v: &[Fx]) -> Fx {
        u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Textbook Lloyd iterations from given initial centroid members.
    fn lloyd(data: &[Vec<Fx>], init: &[usize], iters: usize) -> Vec<Vec<usize>> {
        let mut cents: Vec<Vec<Fx>> = init.iter().map(|&i| data[i].clone()).collect();
        let mut hist: Vec<Vec<usize>> = Vec::new();
        for _ in 0..iters {
            let asg: Vec<usize> = data
                .iter()
                .map(|x| {
                    let mut best = 0;
                    for j in 1..cents.len() {
                        if sq(x, &cents[j]) < sq(x, &cents[best]) {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            for (j, c) in cents.iter_mut().enumerate() {
                let members: Vec<&Vec<Fx>> = data.iter().zip(&asg).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
                assert!(!members.is_empty(), "screened data has no empty clusters");
                for (t, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[t]).sum::<Fx>() / members.len() as Fx;
                }
            }
            let done = hist.last() == Some(&asg);
            hist.push(asg);
            if done {
                break;
            }
        }
        hist
    }

    fn kmeans_plan(n: usize, k: usize, d: usize, iters: usize) -> MaterialPlan {
        let mut plan = MaterialPlan::new();
        demand::kmeans(&mut plan, n, 1, k, d, iters);
        plan
    }

    #[test]
    fn distances_take_one_round() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, -2.0]);
        let xs = share_rows(&x, 1);
        let mut plan = MaterialPlan::new();
        plan.triples((1, 2, 1), 1);
        let (a, b) = run_pair(&plan, 1, |p| {
            let v = shares_of(p, &xs);
            let d = p.sq_distances(&[(&v[0], &v[1])])?;
            Ok((d[0], p.session.meter().total().rounds))
        })
        .unwrap();
        assert!((a.0 + b.0 - 25.0).abs() < 1e-4);
        assert_eq!(a.1, 1);
    }

    #[test]
    fn k_equal_n_keeps_every_point_alone() {
        let x = random_points(5, 3, 4.0, 2);
        let xs = share_rows(&x, 2);
        let (a, b) = run_pair(&kmeans_plan(5, 5, 3, 3), 2, |p| {
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            kmeans(p, shares_of(p, &xs), 5, 3, &mut rng)
        })
        .unwrap();
        let mut seen: Vec<usize> = a.assign.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 5);
        let cents = open(&a.centroids, &b.centroids);
        for (i, &c) in a.assign.iter().enumerate() {
            assert!(sq(&cents[c], &rows(&x)[i]) < 1e-8);
        }
    }

    #[test]
    fn separated_pairs_cluster_together() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.5, 0.25, 6.0, 6.0, 6.25, 5.5]);
        // a public seed whose initial draw takes one point of each pair
        let seed = (0..100u64)
            .find(|&s| {
                let mut rng = ChaCha20Rng::seed_from_u64(s);
                let init = kmeans(&mut Plain::new(), &rows(&x), 2, 1, &mut rng).unwrap().init;
                (init[0] < 2) != (init[1] < 2)
            })
            .unwrap();
        let xs = share_rows(&x, 3);
        let (a, b) = run_pair(&kmeans_plan(4, 2, 2, 5), 3, |p| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            kmeans(p, shares_of(p, &xs), 2, 5, &mut rng)
        })
        .unwrap();
        assert_eq!(a.assign, b.assign);
        assert_eq!(a.assign[0], a.assign[1]);
        assert_eq!(a.assign[2], a.assign[3]);
        assert_ne!(a.assign[0], a.assign[2]);
    }

    #[test]
    fn random_points_follow_the_plaintext_iterations() {
        let (n, d, k, iters) = (64, 4, 4, 10);
        let x = random_points(n, d, 8.0, 4);
        let xs = share_rows(&x, 4);
        let (a, b) = run_pair(&kmeans_plan(n, k, d, iters), 4, |p| {
            p.record_reveals();
            let mut rng = ChaCha20Rng::seed_from_u64(11);
            let o = kmeans(p, shares_of(p, &xs), k, iters, &mut rng)?;
            Ok((o, p.reveal_set()))
        })
        .unwrap();
        assert_eq!(a.0.history, b.0.history);
        let plain = kmeans(&mut Plain::new(), &rows(&x), k, iters, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.0.init, plain.init);
        assert_eq!(a.0.history, plain.history);
        assert_eq!(a.0.history, lloyd(&rows(&x), &plain.init, iters));
        assert_eq!(a.1, BTreeSet::from([("sec_sort", "f")]));
    }

    #[test]
    fn empty_cluster_is_reseeded_from_the_farthest_point() {
        // two identical initial centroids leave cluster 1 empty
        let data = vec![vec![0.0], vec![0.0], vec![1.0], vec![10.0]];
        let mut c = Plain::new();
        let groups = vec![vec![0, 1, 2, 3]];
        let seed = (0..200u64)
            .find(|&s| {
                let mut rng = ChaCha20Rng::seed_from_u64(s);
                let o = kmeans_many(&mut c, &data, &groups, 2, 1, &mut rng).unwrap();
                o[0].init == vec![0, 1] || o[0].init == vec![1, 0]
            })
            .unwrap();
        let o = kmeans(&mut c, &data, 2, 1, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(o.assign, vec![0, 0, 0, 1]);
        assert_eq!(o.centroids[1], vec![10.0]);
    }

    fn hkm(k: usize, leaf_max: usize) -> HkmParams {
        HkmParams {
            k,
            leaf_max,
            max_iters: 10,
            seed: 5,
        }
    }

    #[test]
    fn small_input_is_a_single_leaf() {
        let x = random_points(3, 2, 4.0, 6);
        let xs = share_rows(&x, 6);
        let (a, _) = run_pair(&MaterialPlan::new(), 6, |p| {
            let t = hkm_build(p, shares_of(p, &xs), &hkm(4, 5))?;
            Ok((t, p.session.meter().total().rounds))
        })
        .unwrap();
        assert!(a.0.is_leaf());
        assert_eq!(a.0.ids, vec![0, 1, 2]);
        assert_eq!(a.1, 0);
    }

    #[test]
    fn five_vectors_build_a_depth_two_tree() {
        let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 0.0, 1.0, 0.25, 4.0, 8.0, 8.0, 8.5, 8.0]);
        let params = hkm(2, 2);
        let plain = hkm_build(&mut Plain::new(), &rows(&x), &params).unwrap();
        let xs = share_rows(&x, 7);
        let mut plan = MaterialPlan::new();
        demand::hkm_build(&mut plan, 5, 2, &params);
        let (a, b) = run_pair(&plan, 7, |p| hkm_build(p, shares_of(p, &xs), &params)).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.shape(), plain.shape());
        assert_eq!(a.depth(), 2);
        assert!(a.leaf_count() >= 3);
    }

    /// Spread wide enough that distance gaps dwarf the sort noise.
    fn corpus(n: usize, d: usize, seed: u64) -> DMatrix<Fx> {
        random_points(n, d, 8.0, seed)
    }

    #[test]
    fn tree_of_256_matches_plaintext_and_answers_queries() {
        let (n, d, m) = (256, 4, 5);
        let params = HkmParams {
            k: 4,
            leaf_max: 3 * m,
            max_iters: 10,
            seed: 9,
        };
        let x = corpus(n, d, 8);
        let data = rows(&x);
        let plain = hkm_build(&mut Plain::new(), &data, &params).unwrap();
        let q = vec![1.0, -2.0, 0.5, 3.0];
        let want = hkm_query(&mut Plain::new(), &plain, &data, &q, m).unwrap();

        let xs = share_rows(&x, 8);
        let qs = share_rows(&DMatrix::from_row_slice(1, d, &q), 9);
        let exact = share_rows(&DMatrix::from_row_slice(1, d, &data[17]), 10);
        let mut plan = MaterialPlan::new();
        demand::hkm_build(&mut plan, n, d, &params);
        demand::hkm_query(&mut plan, &plain, n, d);
        demand::hkm_query(&mut plan, &plain, n, d);
        let (a, b) = run_pair(&plan, 8, |p| {
            let v = shares_of(p, &xs);
            let t = hkm_build(p, v, &params)?;
            let r = hkm_query(p, &t, v, &shares_of(p, &qs)[0], m)?;
            let e = hkm_query(p, &t, v, &shares_of(p, &exact)[0], m)?;
            Ok((t.shape(), r, e))
        })
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, plain.shape());
        assert_eq!(a.1, want);
        assert!(a.1.candidates.len() >= 3 * m);
        assert_eq!(a.2.top[0], 17);
    }

    #[test]
    fn few_vectors_degenerate_to_a_linear_scan() {
        let (n, d, m) = (12, 3, 5);
        let x = corpus(n, d, 12);
        let data = rows(&x);
        let tree = hkm_build(&mut Plain::new(), &data, &hkm(4, 3)).unwrap();
        let q = vec![0.5, 0.5, -1.0];
        let got = hkm_query(&mut Plain::new(), &tree, &data, &q, m).unwrap();
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.sort_by(|&i, &j| sq(&q, &data[i as usize]).total_cmp(&sq(&q, &data[j as usize])));
        assert_eq!(got.top, ids[..m].to_vec());
        assert_eq!(got.candidates.len(), n);
    }

    #[test]
    fn hash_arithmetic_examples() {
        let f = LshFunctions {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            b: vec![0.5],
            w: 1.0,
            x: vec![2.0],
        };
        let o = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        let h = lsh_hashes(&mut Plain::new(), &f, &o).unwrap();
        assert_eq!(h[(0, 0)], 12.0);
        assert_eq!(bucket(h[(0, 0)], 1.0), 12);
        assert_eq!(h[(0, 1)], 1.0);
        assert_eq!(bucket(h[(0, 1)], 1.0), 1);

        // the same on shares
        let os = share_rows(&o, 13);
        let half = Pair(
            LshFunctions { b: vec![0.5], ..f.clone() },
            LshFunctions {
                a: DMatrix::zeros(1, 2),
                b: vec![0.0],
                ..f.clone()
            },
        );
        let mut plan = MaterialPlan::new();
        demand::c2lsh_build(&mut plan, 2, 2, 1);
        let (a, _) = run_pair(&plan, 13, |p| {
            let o = shares_of(p, &os);
            let m = DMatrix::from_fn(2, 2, |i, j| o[i][j]);
            lsh_hashes(p, shares_of(p, &half), &m)
        })
        .unwrap();
        assert!((a[(0, 0)] - 12.0).abs() < 1e-4 && (a[(0, 1)] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn revealed_hashes_match_plaintext_on_a_fine_grid() {
        let fine = FixedPointConfig {
            int_bits: 5,
            frac_bits: 20,
            delta: 10,
            epsilon: 28,
            ..cfg()
        };
        fine.validate().unwrap();
        let (n, d) = (1000, 4);
        let params = LshParams {
            functions: 4,
            ..LshParams::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let o = DMatrix::from_fn(n, d, |_, _| truncate(rng.gen_range(-2.0..2.0), &fine));
        let (s1, s2) = split_matrix(&o, &mut rng, &fine).unwrap();
        let os = Pair(s1.values, s2.values);
        let mut plan = MaterialPlan::new();
        demand::c2lsh_build(&mut plan, n, d, params.functions);
        let (a, _) = run_pair_with(fine, &plan, 14, |p| {
            let f = lsh_for_party(p, d, &params);
            lsh_hashes(p, &f, shares_of(p, &os))
        })
        .unwrap();
        let (r1, r2) = party_seeds(14);
        let f = lsh_plain(r1, r2, d, &params, &fine);
        let want = lsh_hashes(&mut Plain::new(), &f, &o).unwrap();
        assert!((a - want).amax() < 1e-6);
    }

    #[test]
    fn hash_multipliers_have_unit_gaussian_sum() {
        let params = LshParams {
            functions: 512,
            ..LshParams::default()
        };
        let f = lsh_plain(1, 2, 8, &params, &cfg());
        let v: Vec<Fx> = f.a.iter().copied().collect();
        let mean = v.iter().sum::<Fx>() / v.len() as Fx;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<Fx>() / v.len() as Fx;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.06, "{mean} {var}");
        assert!(f.b.iter().all(|&b| (0.0..params.w).contains(&b)));
        assert!(f.x.iter().all(|&x| x >= 1.0 && x.fract() == 0.0));
    }

    #[test]
    fn lsh_index_matches_plaintext_and_meters_rounds() {
        let (n, d, m) = (256, 4, 5);
        let params = LshParams {
            seed: 21,
            ..LshParams::default()
        };
        let x = corpus(n, d, 15);
        let data = rows(&x);
        let q = vec![-1.5, 2.0, 0.25, -3.0];
        let (r1, r2) = party_seeds(15);
        let f = lsh_plain(r1, r2, d, &params, &cfg());
        let plain = c2lsh_build(&mut Plain::new(), f, &params, &data).unwrap();
        let want = c2lsh_query(&mut Plain::new(), &plain, &data, &q, m).unwrap();

        let xs = share_rows(&x, 15);
        let qs = share_rows(&DMatrix::from_row_slice(1, d, &q), 16);
        let mut plan = MaterialPlan::new();
        demand::c2lsh_build(&mut plan, n, d, params.functions);
        demand::c2lsh_query(&mut plan, n, d, params.functions);
        let (a, b) = run_pair(&plan, 15, |p| {
            p.record_reveals();
            let v = shares_of(p, &xs);
            let f = lsh_for_party(p, d, &params);
            let idx = c2lsh_build(p, f, &params, v)?;
            let built = p.session.meter().total().rounds;
            let r = c2lsh_query(p, &idx, v, &shares_of(p, &qs)[0], m)?;
            let queried = p.session.meter().total().rounds - built;
            Ok((idx.tables, r, built, queried, p.reveal_set()))
        })
        .unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.0, plain.tables);
        assert_eq!(a.1, want);
        assert!(a.1.candidates.len() >= 3 * m);
        assert_eq!((a.2, a.3), (2, 5));
        assert_eq!(a.4, BTreeSet::from([("c2lsh", "h'"), ("sec_sort", "f")]));
    }

    #[test]
    fn identical_query_collides_everywhere_at_level_zero() {
        let (n, d) = (40, 3);
        let params = LshParams::default();
        let x = corpus(n, d, 17);
        let data = rows(&x);
        let f = lsh_plain(3, 4, d, &params, &cfg());
        let idx = c2lsh_build(&mut Plain::new(), f.clone(), &params, &data).unwrap();
        let qm = DMatrix::from_row_slice(1, d, &data[7]);
        let qb: Vec<i64> = lsh_hashes(&mut Plain::new(), &f, &qm)
            .unwrap()
            .iter()
            .map(|&h| bucket(h, f.w))
            .collect();
        for (table, b) in idx.tables.iter().zip(&qb) {
            assert!(table[b].contains(&7));
        }
        assert!(collision_candidates(&idx, &qb, 1).contains(&7));
        // n ≤ 3m: everything is a candidate
        assert_eq!(collision_candidates(&idx, &qb, 3 * 20).len(), n);
    }
}
