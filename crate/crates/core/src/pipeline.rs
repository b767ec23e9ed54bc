//! End-to-end flow: the owner splits images between the servers, the servers
//! extract, compress and index features under sharing, and the user sends a
//! split query and adds up the two halves of each returned image.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dealer::{Dealer, MaterialPlan};
use crate::error::{Error, Result};
use crate::numeric::{truncate, FixedPointConfig, Fx};
use crate::party::Party;
use crate::protocols::{self, tag};
use crate::secindex::{
    self, c2lsh_build, c2lsh_query, hkm_build, hkm_query, lsh_for_party, rows, Compute, HkmNode, HkmParams,
    LshIndex, LshParams, SearchResult,
};
use crate::secpca::{self, compress_query, sec_pca, PcaState};
use crate::sharefile::{self, Dec, Enc, ShareFile};
use crate::securenn::{infer_batch, PoolMode, PublicModel, Tensor};
use crate::sharing::{split_value, PartyId, ShareDistribution};
use crate::testing::Pair;
use crate::transport::{Session, SessionMeter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexKind {
    Hkm,
    Lsh,
}

impl IndexKind {
    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Hkm => "hkm",
            IndexKind::Lsh => "lsh",
        }
    }
}

impl std::str::FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<IndexKind> {
        match s {
            "hkm" => Ok(IndexKind::Hkm),
            "lsh" | "c2lsh" => Ok(IndexKind::Lsh),
            _ => Err(Error::Config(format!("unknown index kind {s:?}"))),
        }
    }
}

/// Every seed a deployment depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dealer: u64,
    pub owner: u64,
    /// Private seeds of P1 and P2.
    pub servers: (u64, u64),
    /// Public seed for index randomness.
    pub index: u64,
    pub model: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            dealer: 1,
            owner: 2,
            servers: (3, 4),
            index: 5,
            model: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub fixed: FixedPointConfig,
    pub pool: PoolMode,
    pub side: usize,
    /// Target dimension of the compressed features.
    pub s: usize,
    pub kind: IndexKind,
    pub hkm: HkmParams,
    pub lsh: LshParams,
    /// Public factor applied to extracted features before compression.
    pub feature_scale: Fx,
    /// Multiplier on the estimated material demand.
    pub provision: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fixed: FixedPointConfig::default(),
            pool: PoolMode::Tournament,
            side: 16,
            s: 8,
            kind: IndexKind::Hkm,
            hkm: HkmParams {
                k: 4,
                leaf_max: 15,
                max_iters: 10,
                seed: 0,
            },
            lsh: LshParams::default(),
            feature_scale: 4.0,
            provision: 2.0,
        }
    }
}

impl PipelineConfig {
    pub fn model(&self, seeds: &Seeds) -> PublicModel {
        PublicModel::toy(seeds.model, self.side)
    }

    /// Index parameters with the public index seed filled in.
    pub fn hkm_params(&self, seeds: &Seeds) -> HkmParams {
        HkmParams {
            seed: seeds.index,
            ..self.hkm.clone()
        }
    }

    pub fn lsh_params(&self, seeds: &Seeds) -> LshParams {
        LshParams {
            seed: seeds.index,
            ..self.lsh.clone()
        }
    }
}

/// A plaintext image with its public id.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: u32,
    pub pixels: Tensor,
}

/// Seeded procedural textures in `classes` classes. Members of a class are
/// perturbations of its prototype; pixels lie on multiples of 1/8 in [0, 1]
/// and no two images are equal.
pub fn synthetic_corpus(n: usize, classes: usize, side: usize, seed: u64) -> Vec<Image> {
    let classes = classes.max(1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let protos: Vec<Vec<Fx>> = (0..classes)
        .map(|_| {
            let fx = rng.gen_range(0.5..3.0);
            let fy = rng.gen_range(0.5..3.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let cx = rng.gen_range(0.0..side as f64);
            let cy = rng.gen_range(0.0..side as f64);
            let radius = rng.gen_range(2.0..side as f64 / 2.0);
            let blob = rng.gen_range(-0.4..0.4);
            (0..side * side)
                .map(|i| {
                    let (y, x) = ((i / side) as f64, (i % side) as f64);
                    let t = std::f64::consts::TAU * (fx * x + fy * y) / side as f64 + phase;
                    let r2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (radius * radius);
                    0.5 + 0.3 * t.sin() + blob * (-r2).exp()
                })
                .collect()
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let class = out.len() % classes;
        let shift = rng.gen_range(-1i32..=1) as Fx / 8.0;
        let px: Vec<Fx> = protos[class]
            .iter()
            .map(|&v| {
                let noise = match rng.gen_range(0..10) {
                    0 => -1.0,
                    1 => 1.0,
                    _ => 0.0,
                } / 8.0;
                ((v * 8.0).round() / 8.0 + shift + noise).clamp(0.0, 1.0)
            })
            .collect();
        let key: Vec<u8> = px.iter().map(|v| (v * 8.0) as u8).collect();
        if seen.insert(key) {
            let id = out.len() as u32;
            out.push(Image {
                id,
                pixels: Tensor::new(1, side, side, px).expect("square image"),
            });
        }
    }
    out
}

/// One server's share of the outsourced images.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareStore {
    pub owner: PartyId,
    pub ids: Vec<u32>,
    pub images: Vec<Tensor>,
}

impl ShareStore {
    pub fn image(&self, id: u32) -> Option<&Tensor> {
        self.ids.iter().position(|&i| i == id).map(|k| &self.images[k])
    }
}

fn split_tensor(t: &Tensor, rng: &mut ChaCha20Rng, cfg: &FixedPointConfig) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(t.data.len());
    let mut b = Vec::with_capacity(t.data.len());
    for &x in &t.data {
        let (s1, s2) = split_value(truncate(x, cfg), rng, cfg, ShareDistribution::default())?;
        a.push(s1);
        b.push(s2);
    }
    Ok((Tensor { data: a, ..t.clone() }, Tensor { data: b, ..t.clone() }))
}

fn add_tensors(a: &Tensor, b: &Tensor, cfg: &FixedPointConfig) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| truncate(x + y, cfg)).collect();
    Ok(Tensor { data, ..a.clone() })
}

/// Split every image into two share stores.
pub fn outsource(images: &[Image], seed: u64, cfg: &FixedPointConfig) -> Result<Pair<ShareStore>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ids: Vec<u32> = images.iter().map(|i| i.id).collect();
    let mut s1 = Vec::with_capacity(images.len());
    let mut s2 = Vec::with_capacity(images.len());
    for img in images {
        let (a, b) = split_tensor(&img.pixels, &mut rng, cfg)?;
        s1.push(a);
        s2.push(b);
    }
    Ok(Pair(
        ShareStore {
            owner: PartyId::P1,
            ids: ids.clone(),
            images: s1,
        },
        ShareStore {
            owner: PartyId::P2,
            ids,
            images: s2,
        },
    ))
}

pub fn reconstruct_store(stores: &Pair<ShareStore>, cfg: &FixedPointConfig) -> Result<Vec<Image>> {
    let (a, b) = (&stores.0, &stores.1);
    if a.owner == b.owner {
        return Err(Error::SameOwner);
    }
    if a.ids != b.ids {
        return Err(Error::ShapeMismatch("stores hold different ids".into()));
    }
    a.ids
        .iter()
        .zip(a.images.iter().zip(&b.images))
        .map(|(&id, (x, y))| {
            Ok(Image {
                id,
                pixels: add_tensors(x, y, cfg)?,
            })
        })
        .collect()
}

/// The user's split query image.
pub type Trapdoor = Pair<Tensor>;

pub fn trapdoor(query: &Tensor, seed: u64, cfg: &FixedPointConfig) -> Result<Trapdoor> {
    let (a, b) = split_tensor(query, &mut ChaCha20Rng::seed_from_u64(seed), cfg)?;
    Ok(Pair(a, b))
}

/// Index structure held by one server. Tree centroids and hash
/// coefficients are shares; tree shape and bucket tables are public.
#[derive(Debug, Clone, PartialEq)]
pub enum IndexData {
    Hkm(HkmNode),
    Lsh(LshIndex),
}

impl IndexData {
    pub fn kind(&self) -> IndexKind {
        match self {
            IndexData::Hkm(_) => IndexKind::Hkm,
            IndexData::Lsh(_) => IndexKind::Lsh,
        }
    }
}

/// Everything one server keeps after a build.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub pca: PcaState,
    /// Public eigenvector matrix revealed during compression.
    pub t: DMatrix<Fx>,
    /// Compressed feature shares, one row per image.
    pub features: Vec<Vec<Fx>>,
    /// Scaled extracted feature shares, kept for the linear-scan baseline.
    pub raw: Vec<Vec<Fx>>,
    pub index: IndexData,
}

pub mod stage {
    pub const EXTRACT: &str = "extract";
    pub const COMPRESS: &str = "compress";
    pub const INDEX: &str = "index";
    pub const QUERY_EXTRACT: &str = "query-extract";
    pub const QUERY_COMPRESS: &str = "query-compress";
    pub const QUERY_SEARCH: &str = "query-search";
    pub const QUERY_SCAN: &str = "query-scan";
}

fn extract(p: &mut Party, model: &PublicModel, images: &[Tensor], cfg: &PipelineConfig) -> Result<Vec<Vec<Fx>>> {
    let mut feats = infer_batch(p, model, images, cfg.pool)?;
    for row in feats.iter_mut() {
        for v in row.iter_mut() {
            *v = truncate(*v * cfg.feature_scale, &p.cfg);
        }
    }
    Ok(feats)
}

fn to_matrix(rows: &[Vec<Fx>]) -> DMatrix<Fx> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// One server's side of the build: extract, compress, index.
pub fn server_build(
    p: &mut Party,
    store: &ShareStore,
    model: &PublicModel,
    cfg: &PipelineConfig,
    seeds: &Seeds,
) -> Result<ServerState> {
    p.session.set_stage(stage::EXTRACT);
    let raw = extract(p, model, &store.images, cfg)?;
    p.session.set_stage(stage::COMPRESS);
    let out = sec_pca(p, &to_matrix(&raw), cfg.s)?;
    let features = rows(&out.features);
    p.session.set_stage(stage::INDEX);
    let index = match cfg.kind {
        IndexKind::Hkm => IndexData::Hkm(hkm_build(p, &features, &cfg.hkm_params(seeds))?),
        IndexKind::Lsh => {
            let params = cfg.lsh_params(seeds);
            let funcs = lsh_for_party(p, cfg.s, &params);
            IndexData::Lsh(c2lsh_build(p, funcs, &params, &features)?)
        }
    };
    Ok(ServerState {
        pca: out.state,
        t: out.t,
        features,
        raw,
        index,
    })
}

/// Exact top-`m` over the uncompressed features of every image.
pub fn linear_scan<C: Compute>(c: &mut C, raw: &[Vec<Fx>], q: &[Fx], m: usize) -> Result<Vec<u32>> {
    c.tagged(tag::LINEAR_SCAN, |c| {
        let pairs: Vec<(&[Fx], &[Fx])> = raw.iter().map(|r| (q, r.as_slice())).collect();
        let d = c.sq_distances(&pairs)?;
        let perm = c.argsort_many(&[d], m)?.pop().unwrap_or_default();
        Ok(perm.into_iter().take(m).map(|j| j as u32).collect())
    })
}

pub fn search<C: Compute>(c: &mut C, index: &IndexData, data: &[Vec<Fx>], q: &[Fx], m: usize) -> Result<SearchResult> {
    match index {
        IndexData::Hkm(root) => hkm_query(c, root, data, q, m),
        IndexData::Lsh(ix) => c2lsh_query(c, ix, data, q, m),
    }
}

/// One server's answer to a query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub search: SearchResult,
    /// Top-`m` of the linear-scan baseline, when requested.
    pub scan: Option<Vec<u32>>,
    /// This server's shares of the result images, in rank order.
    pub images: Vec<Tensor>,
}

pub fn server_query(
    p: &mut Party,
    state: &ServerState,
    store: &ShareStore,
    model: &PublicModel,
    cfg: &PipelineConfig,
    query: &Tensor,
    m: usize,
    baseline: bool,
) -> Result<QueryOutput> {
    if m == 0 {
        return Err(Error::Config("m must be positive".into()));
    }
    p.session.set_stage(stage::QUERY_EXTRACT);
    let raw = extract(p, model, std::slice::from_ref(query), cfg)?.remove(0);
    p.session.set_stage(stage::QUERY_COMPRESS);
    let q = compress_query(p, &raw, &state.pca)?;
    p.session.set_stage(stage::QUERY_SEARCH);
    let search = search(p, &state.index, &state.features, &q, m)?;
    let scan = if baseline {
        p.session.set_stage(stage::QUERY_SCAN);
        Some(linear_scan(p, &state.raw, &raw, m)?)
    } else {
        None
    };
    let images = search
        .top
        .iter()
        .map(|&i| store.images[i as usize].clone())
        .collect();
    Ok(QueryOutput { search, scan, images })
}

fn feature_dim(model: &PublicModel) -> Result<usize> {
    model.feature_dim()
}

/// Estimated material for a build over `n` images, times the provisioning
/// factor.
pub fn build_plan(cfg: &PipelineConfig, model: &PublicModel, n: usize) -> Result<MaterialPlan> {
    let d = feature_dim(model)?;
    let mut plan = MaterialPlan::new();
    model.demand(&mut plan, n, cfg.pool)?;
    secpca::demand::pca(&mut plan, n, d, cfg.s);
    match cfg.kind {
        IndexKind::Hkm => {
            let params = cfg.hkm.clone();
            secindex::demand::hkm_build(&mut plan, n, cfg.s, &params);
        }
        IndexKind::Lsh => secindex::demand::c2lsh_build(&mut plan, n, cfg.s, cfg.lsh.functions),
    }
    Ok(plan.scaled(cfg.provision))
}

/// Estimated material for `queries` queries against a built index.
pub fn query_plan(
    cfg: &PipelineConfig,
    model: &PublicModel,
    n: usize,
    queries: usize,
    baseline: bool,
) -> Result<MaterialPlan> {
    let d = feature_dim(model)?;
    let mut one = MaterialPlan::new();
    model.demand(&mut one, 1, cfg.pool)?;
    secpca::demand::compress(&mut one, 1, d, cfg.s);
    match cfg.kind {
        IndexKind::Hkm => secindex::demand::hkm_query_bound(&mut one, n, cfg.s, cfg.hkm.k),
        IndexKind::Lsh => secindex::demand::c2lsh_query(&mut one, n, cfg.s, cfg.lsh.functions),
    }
    if baseline {
        one.triples((1, d, 1), n as u64);
        protocols::demand::sort(&mut one, n);
    }
    let mut plan = MaterialPlan::new();
    for _ in 0..queries {
        plan.merge(&one);
    }
    Ok(plan.scaled(cfg.provision))
}

/// Dealer seed for the `op`-th provisioning of a deployment.
pub fn op_seed(dealer: u64, op: u64) -> u64 {
    dealer.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(op)
}

/// An in-process deployment: both servers as threads sharing a channel.
pub struct Deployment {
    pub cfg: PipelineConfig,
    pub seeds: Seeds,
    pub model: PublicModel,
    pub stores: Pair<ShareStore>,
    pub states: Option<Pair<ServerState>>,
    pub meters: Pair<SessionMeter>,
    parties: (Party, Party),
    ops: u64,
}

impl Deployment {
    pub fn new(cfg: PipelineConfig, seeds: Seeds, stores: Pair<ShareStore>) -> Result<Deployment> {
        cfg.fixed.validate()?;
        let model = cfg.model(&seeds);
        let (s1, s2) = Session::pair_in_process(seeds.dealer);
        let empty = |id| crate::dealer::PartyMaterial::empty(id);
        let parties = (
            Party::new(PartyId::P1, cfg.fixed, s1, empty(PartyId::P1), seeds.servers.0),
            Party::new(PartyId::P2, cfg.fixed, s2, empty(PartyId::P2), seeds.servers.1),
        );
        Ok(Deployment {
            cfg,
            seeds,
            model,
            stores,
            states: None,
            meters: Pair(SessionMeter::default(), SessionMeter::default()),
            parties,
            ops: 0,
        })
    }

    /// Outsource `images` and set up the servers.
    pub fn outsource(cfg: PipelineConfig, seeds: Seeds, images: &[Image]) -> Result<Deployment> {
        let stores = outsource(images, seeds.owner, &cfg.fixed)?;
        Deployment::new(cfg, seeds, stores)
    }

    pub fn n(&self) -> usize {
        self.stores.0.ids.len()
    }

    pub fn record_reveals(&mut self) {
        self.parties.0.record_reveals();
        self.parties.1.record_reveals();
    }

    pub fn parties(&self) -> (&Party, &Party) {
        (&self.parties.0, &self.parties.1)
    }

    fn provision(&mut self, plan: &MaterialPlan) -> Result<()> {
        let seed = op_seed(self.seeds.dealer, self.ops);
        self.ops += 1;
        let (m1, m2) = Dealer::new(seed, self.cfg.fixed).generate(plan)?;
        self.parties.0.material = m1;
        self.parties.1.material = m2;
        Ok(())
    }

    fn collect_meters(&mut self) {
        self.meters.0.merge(&self.parties.0.session.take_meter());
        self.meters.1.merge(&self.parties.1.session.take_meter());
    }

    pub fn build(&mut self) -> Result<()> {
        let plan = build_plan(&self.cfg, &self.model, self.n())?;
        self.provision(&plan)?;
        let (stores, model, cfg, seeds) = (&self.stores, &self.model, &self.cfg, &self.seeds);
        let (a, b) = crate::testing::run_parties(&mut self.parties.0, &mut self.parties.1, |p| {
            server_build(p, stores.get(p.id), model, cfg, seeds)
        })?;
        self.collect_meters();
        self.states = Some(Pair(a, b));
        Ok(())
    }

    /// Run queries (already split) and return both servers' outputs.
    pub fn query_many(&mut self, trapdoors: &[Trapdoor], m: usize, baseline: bool) -> Result<Vec<Pair<QueryOutput>>> {
        let states = self
            .states
            .take()
            .ok_or_else(|| Error::Config("query before build".into()))?;
        let res = self.query_with(&states, trapdoors, m, baseline);
        self.states = Some(states);
        res
    }

    fn query_with(
        &mut self,
        states: &Pair<ServerState>,
        trapdoors: &[Trapdoor],
        m: usize,
        baseline: bool,
    ) -> Result<Vec<Pair<QueryOutput>>> {
        let plan = query_plan(&self.cfg, &self.model, self.n(), trapdoors.len(), baseline)?;
        self.provision(&plan)?;
        let (stores, model, cfg) = (&self.stores, &self.model, &self.cfg);
        let (a, b) = crate::testing::run_parties(&mut self.parties.0, &mut self.parties.1, |p| {
            trapdoors
                .iter()
                .map(|t| server_query(p, states.get(p.id), stores.get(p.id), model, cfg, t.get(p.id), m, baseline))
                .collect::<Result<Vec<_>>>()
        })?;
        self.collect_meters();
        Ok(a.into_iter().zip(b).map(|(x, y)| Pair(x, y)).collect())
    }

    pub fn query(&mut self, query: &Tensor, seed: u64, m: usize) -> Result<RetrievalResult> {
        let t = trapdoor(query, seed, &self.cfg.fixed)?;
        let out = self.query_many(std::slice::from_ref(&t), m, false)?.remove(0);
        RetrievalResult::from_outputs(&out)
    }
}

/// What the user receives: ranked ids and both servers' image shares.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ids: Vec<u32>,
    pub shares: Pair<Vec<Tensor>>,
}

impl RetrievalResult {
    pub fn from_outputs(out: &Pair<QueryOutput>) -> Result<RetrievalResult> {
        if out.0.search.top != out.1.search.top {
            return Err(Error::ProtocolViolation("servers disagree on the ranking".into()));
        }
        Ok(RetrievalResult {
            ids: out.0.search.top.clone(),
            shares: Pair(out.0.images.clone(), out.1.images.clone()),
        })
    }

    /// The user's decryption: add the two shares of every image.
    pub fn decrypt(&self, cfg: &FixedPointConfig) -> Result<Vec<Image>> {
        self.ids
            .iter()
            .zip(self.shares.0.iter().zip(&self.shares.1))
            .map(|(&id, (a, b))| {
                Ok(Image {
                    id,
                    pixels: add_tensors(a, b, cfg)?,
                })
            })
            .collect()
    }
}

fn party_from(v: u32) -> Result<PartyId> {
    match v {
        0 => Ok(PartyId::P1),
        1 => Ok(PartyId::P2),
        _ => Err(Error::Format(format!("party index {v}"))),
    }
}

fn rows_matrix(rows: &[Vec<Fx>], d: usize) -> DMatrix<Fx> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Owner code of an `IMGS` section holding plaintext images.
const PLAIN_OWNER: u32 = 2;

fn encode_images(owner: u32, ids: &[u32], images: &[Tensor]) -> Vec<u8> {
    let (c, h, w) = images.first().map_or((1, 0, 0), Tensor::shape);
    let mut e = Enc::default();
    e.u32(owner).u32(ids.len() as u32);
    for &id in ids {
        e.u32(id);
    }
    let data: Vec<Fx> = images.iter().flat_map(|t| t.data.iter().copied()).collect();
    e.array(&[images.len(), c, h, w], &data);
    e.0
}

fn decode_images(buf: &[u8]) -> Result<(u32, Vec<u32>, Vec<Tensor>)> {
    let mut d = Dec::new(buf);
    let owner = d.u32()?;
    let n = d.u32()? as usize;
    let ids = (0..n).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let (dims, data) = d.array()?;
    d.finish()?;
    let [count, c, h, w] = dims[..] else {
        return Err(Error::Format(format!("image dims {dims:?}")));
    };
    if count != n {
        return Err(Error::Format(format!("{n} ids but {count} images")));
    }
    let per = c * h * w;
    let images = (0..n)
        .map(|i| Tensor::new(c, h, w, data[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((owner, ids, images))
}

pub fn save_images(path: &Path, images: &[Image]) -> Result<()> {
    let ids: Vec<u32> = images.iter().map(|i| i.id).collect();
    let px: Vec<Tensor> = images.iter().map(|i| i.pixels.clone()).collect();
    let mut f = ShareFile::new();
    f.push(sharefile::IMGS, encode_images(PLAIN_OWNER, &ids, &px));
    f.save(path)
}

pub fn load_images(path: &Path) -> Result<Vec<Image>> {
    let (owner, ids, images) = decode_images(ShareFile::load(path)?.get(sharefile::IMGS)?)?;
    if owner != PLAIN_OWNER {
        return Err(Error::Format("expected plaintext images, found shares".into()));
    }
    Ok(ids.into_iter().zip(images).map(|(id, pixels)| Image { id, pixels }).collect())
}

impl ShareStore {
    pub fn to_file(&self) -> ShareFile {
        let mut f = ShareFile::new();
        f.push(sharefile::IMGS, encode_images(self.owner.index() as u32, &self.ids, &self.images));
        f
    }

    pub fn from_file(f: &ShareFile) -> Result<ShareStore> {
        let (owner, ids, images) = decode_images(f.get(sharefile::IMGS)?)?;
        Ok(ShareStore {
            owner: party_from(owner)?,
            ids,
            images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<ShareStore> {
        ShareStore::from_file(&ShareFile::load(path)?)
    }
}

impl ServerState {
    /// Tree parameters are stored alongside an HKM index.
    pub fn to_file(&self, hkm: &HkmParams) -> ShareFile {
        let mut f = ShareFile::new();
        f.push(sharefile::PCAS, sharefile::encode_pca(&self.pca));
        let mut e = Enc::default();
        e.matrix(&self.t)
            .matrix(&rows_matrix(&self.features, self.pca.target_dim()))
            .matrix(&rows_matrix(&self.raw, self.pca.dim()));
        f.push(sharefile::FEAT, e.0);
        match &self.index {
            IndexData::Hkm(root) => f.push(sharefile::HKMI, sharefile::encode_hkm(root, hkm)),
            IndexData::Lsh(ix) => f.push(sharefile::LSHI, sharefile::encode_lsh(ix)),
        };
        f
    }

    pub fn from_file(f: &ShareFile) -> Result<ServerState> {
        let pca = sharefile::decode_pca(f.get(sharefile::PCAS)?)?;
        let mut d = Dec::new(f.get(sharefile::FEAT)?);
        let t = d.matrix()?;
        let features = rows(&d.matrix()?);
        let raw = rows(&d.matrix()?);
        d.finish()?;
        let index = match f.get(sharefile::HKMI) {
            Ok(b) => IndexData::Hkm(sharefile::decode_hkm(b)?.0),
            Err(_) => IndexData::Lsh(sharefile::decode_lsh(f.get(sharefile::LSHI)?)?),
        };
        Ok(ServerState {
            pca,
            t,
            features,
            raw,
            index,
        })
    }

    pub fn to_bytes(&self, hkm: &HkmParams) -> Vec<u8> {
        let mut buf = Vec::new();
        self.to_file(hkm).write_to(&mut buf).expect("in-memory write");
        buf
    }
}
