//! Offline correlated randomness: Beaver triples, comparison tuples and sort
//! tuples, generated by a trusted dealer and consumed once by each party.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{truncate, FixedPointConfig, Fx};
use crate::parallel;
use crate::sharing::{split_value, PartyId, ShareDistribution};

/// Triple shape `(p, q, r)`: `A` is `p×q`, `B` is `q×r`, `C = A·B` is `p×r`.
pub type Shape = (usize, usize, usize);

pub const SCALAR: Shape = (1, 1, 1);

const CHUNK: usize = 2048;
const FILE_MAGIC: &[u8; 4] = b"ASTM";
const FILE_VERSION: u16 = 1;

const KIND_TRIPLE: u8 = 0;
const KIND_CMP: u8 = 1;
const KIND_SORT: u8 = 2;

fn stride(s: Shape) -> usize {
    let (p, q, r) = s;
    p * q + q * r + p * r
}

/// How many items of each kind a session needs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MaterialPlan {
    pub triples: BTreeMap<Shape, u64>,
    pub cmp: u64,
    pub sort: u64,
}

impl MaterialPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triples(&mut self, shape: Shape, n: u64) -> &mut Self {
        if n > 0 {
            *self.triples.entry(shape).or_default() += n;
        }
        self
    }

    pub fn scalars(&mut self, n: u64) -> &mut Self {
        self.triples(SCALAR, n)
    }

    pub fn cmps(&mut self, n: u64) -> &mut Self {
        self.cmp += n;
        self
    }

    pub fn sorts(&mut self, n: u64) -> &mut Self {
        self.sort += n;
        self
    }

    pub fn merge(&mut self, other: &MaterialPlan) -> &mut Self {
        for (&s, &n) in &other.triples {
            self.triples(s, n);
        }
        self.cmp += other.cmp;
        self.sort += other.sort;
        self
    }

    /// Multiply every count by `factor`, rounding up.
    pub fn scaled(&self, factor: f64) -> MaterialPlan {
        let up = |n: u64| (n as f64 * factor).ceil() as u64;
        MaterialPlan {
            triples: self.triples.iter().map(|(&s, &n)| (s, up(n))).collect(),
            cmp: up(self.cmp),
            sort: up(self.sort),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty() && self.cmp == 0 && self.sort == 0
    }
}

/// Parameters of the dealer's sampling laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DealerParams {
    /// Upper log2 magnitude of each triple share of `A` and `B`.
    pub mask_log2_max: f64,
    /// Mean and deviation of log2|r| in comparison tuples.
    pub cmp_log2_mean: f64,
    pub cmp_log2_std: f64,
    /// Range of log2 t in sort tuples.
    pub sort_log2_min: f64,
    pub sort_log2_max: f64,
}

impl Default for DealerParams {
    fn default() -> Self {
        Self {
            mask_log2_max: 4.0,
            cmp_log2_mean: 0.0,
            cmp_log2_std: 1.5,
            sort_log2_min: -2.0,
            sort_log2_max: 4.0,
        }
    }
}

pub struct Dealer {
    pub seed: u64,
    pub cfg: FixedPointConfig,
    pub dist: ShareDistribution,
    pub params: DealerParams,
}

/// One party's half of one matrix triple.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTriple {
    pub a: DMatrix<Fx>,
    pub b: DMatrix<Fx>,
    pub c: DMatrix<Fx>,
}

/// One party's halves of `n` scalar triples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalarTriples {
    pub a: Vec<Fx>,
    pub b: Vec<Fx>,
    pub c: Vec<Fx>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CmpTuples {
    pub r: Vec<Fx>,
    pub sgn: Vec<Fx>,
    pub k: Vec<Fx>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortTuple {
    pub t: Fx,
    pub k: Fx,
}

#[derive(Debug, Clone, PartialEq)]
struct Section {
    kind: u8,
    shape: Shape,
    stride: usize,
    data: Vec<Fx>,
    next: usize,
}

impl Section {
    fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[Fx]> {
        if self.next + n > self.len() {
            return Err(Error::MaterialExhausted(format!(
                "{what}: wanted {n}, {} left",
                self.len() - self.next
            )));
        }
        let s = &self.data[self.next * self.stride..(self.next + n) * self.stride];
        self.next += n;
        Ok(s)
    }
}

/// Ordered queues of one party's material. Each item is handed out once.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyMaterial {
    pub owner: PartyId,
    triples: BTreeMap<Shape, Section>,
    cmp: Section,
    sort: Section,
}

impl PartyMaterial {
    pub fn empty(owner: PartyId) -> Self {
        Self {
            owner,
            triples: BTreeMap::new(),
            cmp: Section {
                kind: KIND_CMP,
                shape: SCALAR,
                stride: 3,
                data: Vec::new(),
                next: 0,
            },
            sort: Section {
                kind: KIND_SORT,
                shape: SCALAR,
                stride: 2,
                data: Vec::new(),
                next: 0,
            },
        }
    }

    pub fn take_scalars(&mut self, n: usize) -> Result<ScalarTriples> {
        if n == 0 {
            return Ok(ScalarTriples::default());
        }
        let sec = self
            .triples
            .get_mut(&SCALAR)
            .ok_or_else(|| Error::MaterialExhausted("no scalar triples".into()))?;
        let d = sec.take(n, "scalar triples")?;
        let mut out = ScalarTriples {
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
        };
        for rec in d.chunks_exact(3) {
            out.a.push(rec[0]);
            out.b.push(rec[1]);
            out.c.push(rec[2]);
        }
        Ok(out)
    }

    pub fn take_matrix(&mut self, shape: Shape) -> Result<MatrixTriple> {
        let sec = self
            .triples
            .get_mut(&shape)
            .ok_or_else(|| Error::MaterialExhausted(format!("no triples of shape {shape:?}")))?;
        let d = sec.take(1, "matrix triples")?;
        let (p, q, r) = shape;
        let (da, rest) = d.split_at(p * q);
        let (db, dc) = rest.split_at(q * r);
        Ok(MatrixTriple {
            a: DMatrix::from_column_slice(p, q, da),
            b: DMatrix::from_column_slice(q, r, db),
            c: DMatrix::from_column_slice(p, r, dc),
        })
    }

    pub fn take_cmp(&mut self, n: usize) -> Result<CmpTuples> {
        let d = self.cmp.take(n, "comparison tuples")?;
        let mut out = CmpTuples::default();
        for rec in d.chunks_exact(3) {
            out.r.push(rec[0]);
            out.sgn.push(rec[1]);
            out.k.push(rec[2]);
        }
        Ok(out)
    }

    pub fn take_sort(&mut self) -> Result<SortTuple> {
        let d = self.sort.take(1, "sort tuples")?;
        Ok(SortTuple { t: d[0], k: d[1] })
    }

    /// Items not yet consumed.
    pub fn remaining(&self) -> MaterialPlan {
        let mut p = MaterialPlan::new();
        for (&s, sec) in &self.triples {
            p.triples(s, (sec.len() - sec.next) as u64);
        }
        p.cmps((self.cmp.len() - self.cmp.next) as u64);
        p.sorts((self.sort.len() - self.sort.next) as u64);
        p
    }

    fn sections(&self) -> impl Iterator<Item = &Section> {
        self.triples.values().chain([&self.cmp, &self.sort])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FILE_MAGIC)?;
        w.write_all(&FILE_VERSION.to_le_bytes())?;
        w.write_all(&[self.owner.index() as u8])?;
        let secs: Vec<&Section> = self.sections().filter(|s| !s.data.is_empty()).collect();
        w.write_all(&(secs.len() as u32).to_le_bytes())?;
        for s in secs {
            w.write_all(&[s.kind])?;
            for d in [s.shape.0, s.shape.1, s.shape.2] {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            // only unconsumed items are persisted
            let live = &s.data[s.next * s.stride..];
            w.write_all(&((live.len() / s.stride) as u64).to_le_bytes())?;
            for v in live {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<PartyMaterial> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(Error::Format("not a material file".into()));
        }
        let version = u16::from_le_bytes(read_n::<2>(r)?);
        if version != FILE_VERSION {
            return Err(Error::Format(format!("material version {version}")));
        }
        let owner = match read_n::<1>(r)?[0] {
            0 => PartyId::P1,
            1 => PartyId::P2,
            x => return Err(Error::Format(format!("bad party byte {x}"))),
        };
        let mut m = PartyMaterial::empty(owner);
        let nsec = u32::from_le_bytes(read_n::<4>(r)?);
        for _ in 0..nsec {
            let kind = read_n::<1>(r)?[0];
            let mut dims = [0usize; 3];
            for d in &mut dims {
                *d = u32::from_le_bytes(read_n::<4>(r)?) as usize;
            }
            let shape = (dims[0], dims[1], dims[2]);
            let count = u64::from_le_bytes(read_n::<8>(r)?) as usize;
            let st = match kind {
                KIND_TRIPLE => stride(shape),
                KIND_CMP => 3,
                KIND_SORT => 2,
                _ => return Err(Error::Format(format!("bad section kind {kind}"))),
            };
            let mut raw = vec![0u8; count * st * 8];
            r.read_exact(&mut raw)?;
            let data: Vec<Fx> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let sec = Section {
                kind,
                shape,
                stride: st,
                data,
                next: 0,
            };
            match kind {
                KIND_TRIPLE => {
                    m.triples.insert(shape, sec);
                }
                KIND_CMP => m.cmp = sec,
                _ => m.sort = sec,
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PartyMaterial> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_n<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

impl Dealer {
    pub fn new(seed: u64, cfg: FixedPointConfig) -> Self {
        Self {
            seed,
            cfg,
            dist: ShareDistribution::default(),
            params: DealerParams::default(),
        }
    }

    fn chunk_rng(&self, kind: u8, shape: Shape, chunk: usize) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([kind]);
        for d in [shape.0, shape.1, shape.2, chunk] {
            h.update((d as u64).to_le_bytes());
        }
        ChaCha20Rng::from_seed(h.finalize().into())
    }

    fn mask_share(&self, rng: &mut ChaCha20Rng) -> Fx {
        let lo = self.cfg.share_lower().log2();
        let hi = self.params.mask_log2_max.min(self.cfg.share_upper().log2());
        loop {
            let e: f64 = rng.gen_range(lo..hi);
            let v = truncate(e.exp2(), &self.cfg);
            if v > self.cfg.share_lower() {
                return if rng.gen::<bool>() { v } else { -v };
            }
        }
    }

    fn triple_into(&self, rng: &mut ChaCha20Rng, shape: Shape, h1: &mut [Fx], h2: &mut [Fx]) {
        let (p, q, r) = shape;
        let (na, nb) = (p * q, q * r);
        for i in 0..na + nb {
            h1[i] = self.mask_share(rng);
            h2[i] = self.mask_share(rng);
        }
        let a = DMatrix::from_fn(p, q, |i, j| h1[i + j * p] + h2[i + j * p]);
        let b = DMatrix::from_fn(q, r, |i, j| h1[na + i + j * q] + h2[na + i + j * q]);
        let c = a * b;
        for (i, &cv) in c.iter().enumerate() {
            let c1 = self.mask_share(rng);
            h1[na + nb + i] = c1;
            // never transmitted, so it keeps the full precision
            h2[na + nb + i] = cv - c1;
        }
    }

    fn cmp_into(&self, rng: &mut ChaCha20Rng, h1: &mut [Fx], h2: &mut [Fx]) -> Result<()> {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let e = (self.params.cmp_log2_mean + self.params.cmp_log2_std * z).clamp(-4.0, 5.0);
        let mag = truncate(e.exp2(), &self.cfg).max(self.cfg.ulp());
        let r = if rng.gen::<bool>() { mag } else { -mag };
        let sgn = if r > 0.0 { 1.0 } else { 0.0 };
        // |k| uniform in (0, eta|r|], floored onto the grid so the bound holds
        let kmag = rng.gen_range(0.0..1.0f64);
        let kmag = ((1.0 - kmag) * self.cfg.eta * mag / self.cfg.ulp()).floor() * self.cfg.ulp();
        let k = if rng.gen::<bool>() { kmag } else { -kmag };
        for (i, v) in [r, sgn, k].into_iter().enumerate() {
            let (s1, s2) = split_value(v, rng, &self.cfg, self.dist)?;
            h1[i] = s1;
            h2[i] = s2;
        }
        Ok(())
    }

    fn sort_into(&self, rng: &mut ChaCha20Rng, h1: &mut [Fx], h2: &mut [Fx]) -> Result<()> {
        let e = rng.gen_range(self.params.sort_log2_min..self.params.sort_log2_max);
        let t = truncate(e.exp2(), &self.cfg).max(self.cfg.ulp());
        let kmag = (rng.gen_range(0.0..=1.0f64) * self.cfg.eta * t / self.cfg.ulp()).floor()
            * self.cfg.ulp();
        let k = if rng.gen::<bool>() { kmag } else { -kmag };
        for (i, v) in [t, k].into_iter().enumerate() {
            let (s1, s2) = split_value(v, rng, &self.cfg, self.dist)?;
            h1[i] = s1;
            h2[i] = s2;
        }
        Ok(())
    }

    fn gen_section(&self, kind: u8, shape: Shape, count: usize) -> Result<(Section, Section)> {
        let st = match kind {
            KIND_TRIPLE => stride(shape),
            KIND_CMP => 3,
            _ => 2,
        };
        let chunks = count.div_ceil(CHUNK);
        let parts: Vec<Result<(Vec<Fx>, Vec<Fx>)>> = parallel::map_range(chunks, |ci| {
            let n = CHUNK.min(count - ci * CHUNK);
            let mut rng = self.chunk_rng(kind, shape, ci);
            let mut d1 = vec![0.0; n * st];
            let mut d2 = vec![0.0; n * st];
            for (h1, h2) in d1.chunks_exact_mut(st).zip(d2.chunks_exact_mut(st)) {
                match kind {
                    KIND_TRIPLE => self.triple_into(&mut rng, shape, h1, h2),
                    KIND_CMP => self.cmp_into(&mut rng, h1, h2)?,
                    _ => self.sort_into(&mut rng, h1, h2)?,
                }
            }
            Ok((d1, d2))
        });
        let mut d1 = Vec::with_capacity(count * st);
        let mut d2 = Vec::with_capacity(count * st);
        for p in parts {
            let (a, b) = p?;
            d1.extend(a);
            d2.extend(b);
        }
        let mk = |data| Section {
            kind,
            shape,
            stride: st,
            data,
            next: 0,
        };
        Ok((mk(d1), mk(d2)))
    }

    /// Both parties' material for `plan`. Identical seeds give bit-identical
    /// output regardless of thread count.
    pub fn generate(&self, plan: &MaterialPlan) -> Result<(PartyMaterial, PartyMaterial)> {
        let mut m1 = PartyMaterial::empty(PartyId::P1);
        let mut m2 = PartyMaterial::empty(PartyId::P2);
        for (&shape, &n) in &plan.triples {
            let (a, b) = self.gen_section(KIND_TRIPLE, shape, n as usize)?;
            m1.triples.insert(shape, a);
            m2.triples.insert(shape, b);
        }
        let (a, b) = self.gen_section(KIND_CMP, SCALAR, plan.cmp as usize)?;
        m1.cmp = a;
        m2.cmp = b;
        let (a, b) = self.gen_section(KIND_SORT, SCALAR, plan.sort as usize)?;
        m1.sort = a;
        m2.sort = b;
        Ok((m1, m2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub kind: String,
    pub count: u64,
    pub seconds: f64,
    pub rate: f64,
}

impl std::fmt::Display for ThroughputReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} tuples in {:.3} s ({:.0} tuples/s)",
            self.kind, self.count, self.seconds, self.rate
        )
    }
}

/// Which material kind to time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialKind {
    Triple(Shape),
    Cmp,
    Sort,
}

/// Generate material of one kind for about `duration` and report the rate.
pub fn throughput_report(dealer: &Dealer, kind: MaterialKind, duration: Duration) -> Result<ThroughputReport> {
    if duration < Duration::from_millis(1) {
        return Err(Error::DurationTooShort);
    }
    let (code, shape, label) = match kind {
        MaterialKind::Triple(s) if s == SCALAR => (KIND_TRIPLE, s, "scalar-triple".to_string()),
        MaterialKind::Triple(s) => (KIND_TRIPLE, s, format!("matrix-triple-{}x{}x{}", s.0, s.1, s.2)),
        MaterialKind::Cmp => (KIND_CMP, SCALAR, "cmp-tuple".to_string()),
        MaterialKind::Sort => (KIND_SORT, SCALAR, "sort-tuple".to_string()),
    };
    let start = Instant::now();
    let mut count = 0u64;
    let mut batch = 64usize;
    while start.elapsed() < duration {
        dealer.gen_section(code, shape, batch)?;
        count += batch as u64;
        batch = (batch * 2).min(1 << 16);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(ThroughputReport {
        kind: label,
        count,
        seconds,
        rate: count as f64 / seconds,
    })
}
