//! Command-line front end for the owner, dealer, servers and user, plus the
//! oracle and equivalence tooling.
//!
//! Every command reads one `key = value` session config. Both servers hash
//! its canonical form and compare hashes before any protocol message.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::dealer::{Dealer, PartyMaterial};
use crate::error::{Error, Result};
use crate::oracle::{compare, oracle_run, DecisionLog, QueryDecision};
use crate::party::Party;
use crate::pipeline::{
    build_plan, load_images, op_seed, query_plan, save_images, server_build, server_query, stage, synthetic_corpus,
    trapdoor, Image, PipelineConfig, Seeds, ServerState, ShareStore,
};
use crate::securenn::{PoolMode, PublicModel};
use crate::sharefile::ShareFile;
use crate::sharing::PartyId;
use crate::testing::Pair;
use crate::transport::{InProcChannel, Session, SessionMeter, TcpChannel, CARRIER_WORD_BITS};

#[derive(Debug, Clone, PartialEq)]
pub enum Transport {
    InProc,
    Tcp(String),
}

/// Everything both servers must agree on.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub pipeline: PipelineConfig,
    pub seeds: Seeds,
    /// Results per query.
    pub m: usize,
    pub corpus_n: usize,
    pub corpus_classes: usize,
    pub corpus_seed: u64,
    pub corpus_queries: usize,
    pub transport: Transport,
    pub timeout: Duration,
    /// Also run the linear-scan baseline for every query.
    pub baseline: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            pipeline: PipelineConfig::default(),
            seeds: Seeds::default(),
            m: 5,
            corpus_n: 256,
            corpus_classes: 8,
            corpus_seed: 7,
            corpus_queries: 20,
            transport: Transport::InProc,
            timeout: Duration::from_secs(30),
            baseline: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl SessionConfig {
    pub fn parse(text: &str) -> Result<SessionConfig> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if seen.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("duplicate key {k}")));
            }
        }
        let mut c = SessionConfig::default();
        for (k, v) in seen.iter().filter(|(k, _)| k.as_str() != "addr") {
            c.set(k, v)?;
        }
        match (&mut c.transport, seen.get("addr")) {
            (Transport::Tcp(a), Some(v)) => *a = v.clone(),
            (Transport::Tcp(_), None) => return Err(Error::Config("transport = tcp needs addr".into())),
            (Transport::InProc, _) => {}
        }
        c.pipeline.fixed.validate()?;
        c.check()?;
        Ok(c)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match k {
            "int_bits" => p.fixed.int_bits = parse(k, v)?,
            "frac_bits" => p.fixed.frac_bits = parse(k, v)?,
            "delta" => p.fixed.delta = parse(k, v)?,
            "epsilon" => p.fixed.epsilon = parse(k, v)?,
            "eta" => p.fixed.eta = parse(k, v)?,
            "pool" => {
                p.pool = match v {
                    "tournament" => PoolMode::Tournament,
                    "sort" => PoolMode::Sort,
                    _ => return Err(Error::Config(format!("pool: unknown mode {v:?}"))),
                }
            }
            "side" => p.side = parse(k, v)?,
            "s" => p.s = parse(k, v)?,
            "index" => p.kind = v.parse()?,
            "k" => p.hkm.k = parse(k, v)?,
            "leaf_max" => p.hkm.leaf_max = parse(k, v)?,
            "max_iters" => p.hkm.max_iters = parse(k, v)?,
            "m_f" => p.lsh.functions = parse(k, v)?,
            "w" => p.lsh.w = parse(k, v)?,
            "alpha" => p.lsh.alpha = parse(k, v)?,
            "feature_scale" => p.feature_scale = parse(k, v)?,
            "provision" => p.provision = parse(k, v)?,
            "m" => self.m = parse(k, v)?,
            "seed.dealer" => self.seeds.dealer = parse(k, v)?,
            "seed.owner" => self.seeds.owner = parse(k, v)?,
            "seed.p1" => self.seeds.servers.0 = parse(k, v)?,
            "seed.p2" => self.seeds.servers.1 = parse(k, v)?,
            "seed.index" => self.seeds.index = parse(k, v)?,
            "seed.model" => self.seeds.model = parse(k, v)?,
            "corpus.n" => self.corpus_n = parse(k, v)?,
            "corpus.classes" => self.corpus_classes = parse(k, v)?,
            "corpus.seed" => self.corpus_seed = parse(k, v)?,
            "corpus.queries" => self.corpus_queries = parse(k, v)?,
            "transport" => {
                self.transport = match v {
                    "inproc" => Transport::InProc,
                    "tcp" => Transport::Tcp(String::new()),
                    _ => return Err(Error::Config(format!("transport: unknown backend {v:?}"))),
                }
            }
            "timeout_secs" => self.timeout = Duration::from_secs(parse(k, v)?),
            "baseline" => self.baseline = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let p = &self.pipeline;
        let positive = [
            ("m", self.m),
            ("s", p.s),
            ("k", p.hkm.k),
            ("leaf_max", p.hkm.leaf_max),
            ("m_f", p.lsh.functions),
            ("side", p.side),
            ("corpus.classes", self.corpus_classes),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if p.hkm.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if !(p.lsh.w > 0.0 && p.lsh.alpha > 0.0 && p.lsh.alpha <= 1.0) {
            return Err(Error::Config("need w > 0 and 0 < alpha <= 1".into()));
        }
        if !(p.feature_scale > 0.0 && p.provision >= 1.0) {
            return Err(Error::Config("need feature_scale > 0 and provision >= 1".into()));
        }
        Ok(())
    }

    /// Sorted `key = value` lines of every setting, independent of how the
    /// file was written.
    pub fn canonical(&self) -> String {
        let p = &self.pipeline;
        let f = &p.fixed;
        let mut kv: Vec<(&str, String)> = vec![
            ("int_bits", f.int_bits.to_string()),
            ("frac_bits", f.frac_bits.to_string()),
            ("delta", f.delta.to_string()),
            ("epsilon", f.epsilon.to_string()),
            ("eta", f.eta.to_string()),
            ("pool", format!("{:?}", p.pool).to_lowercase()),
            ("side", p.side.to_string()),
            ("s", p.s.to_string()),
            ("index", p.kind.name().to_string()),
            ("k", p.hkm.k.to_string()),
            ("leaf_max", p.hkm.leaf_max.to_string()),
            ("max_iters", p.hkm.max_iters.to_string()),
            ("m_f", p.lsh.functions.to_string()),
            ("w", p.lsh.w.to_string()),
            ("alpha", p.lsh.alpha.to_string()),
            ("feature_scale", p.feature_scale.to_string()),
            ("provision", p.provision.to_string()),
            ("m", self.m.to_string()),
            ("seed.dealer", self.seeds.dealer.to_string()),
            ("seed.owner", self.seeds.owner.to_string()),
            ("seed.p1", self.seeds.servers.0.to_string()),
            ("seed.p2", self.seeds.servers.1.to_string()),
            ("seed.index", self.seeds.index.to_string()),
            ("seed.model", self.seeds.model.to_string()),
            ("corpus.n", self.corpus_n.to_string()),
            ("corpus.classes", self.corpus_classes.to_string()),
            ("corpus.seed", self.corpus_seed.to_string()),
            ("corpus.queries", self.corpus_queries.to_string()),
            ("timeout_secs", self.timeout.as_secs().to_string()),
            ("baseline", self.baseline.to_string()),
        ];
        match &self.transport {
            Transport::InProc => kv.push(("transport", "inproc".into())),
            Transport::Tcp(a) => {
                kv.push(("transport", "tcp".into()));
                kv.push(("addr", a.clone()));
            }
        }
        kv.sort();
        kv.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn load(path: &Path) -> Result<SessionConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        SessionConfig::parse(&text)
    }
}

/// Exchange config hashes; both sides fail on a mismatch.
pub fn handshake(session: &mut Session, hash: &[u8; 32]) -> Result<()> {
    session.set_stage("handshake");
    let got = session.exchange(hash.to_vec())?;
    if got.as_slice() != hash.as_slice() {
        return Err(Error::ConfigMismatch);
    }
    Ok(())
}

/// Per-role files under one deployment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

fn party_dir(id: PartyId) -> &'static str {
    match id {
        PartyId::P1 => "p1",
        PartyId::P2 => "p2",
    }
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Layout {
        Layout { root: root.into() }
    }

    pub fn party(&self, id: PartyId) -> PathBuf {
        self.root.join(party_dir(id))
    }

    pub fn store(&self, id: PartyId) -> PathBuf {
        self.party(id).join("shares").join("store.assh")
    }

    pub fn material(&self, id: PartyId, op: Op) -> PathBuf {
        self.party(id).join("material").join(format!("{}.mat", op.name()))
    }

    pub fn state(&self, id: PartyId) -> PathBuf {
        self.party(id).join("index").join("state.assh")
    }

    pub fn model(&self, id: PartyId) -> (PathBuf, PathBuf) {
        (self.party(id).join("model.json"), self.party(id).join("model.bin"))
    }

    pub fn meter(&self, id: PartyId) -> PathBuf {
        self.party(id).join("meter.csv")
    }

    pub fn decisions(&self, id: PartyId) -> PathBuf {
        self.party(id).join("decisions.json")
    }

    pub fn result(&self, id: PartyId, q: usize) -> PathBuf {
        self.party(id).join("results").join(format!("q{q:03}.assh"))
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("owner").join("images.assh")
    }

    pub fn queries(&self) -> PathBuf {
        self.root.join("user").join("queries.assh")
    }

    pub fn trapdoor(&self, id: PartyId, q: usize) -> PathBuf {
        self.root
            .join("user")
            .join("trapdoors")
            .join(format!("q{q:03}.{}.assh", party_dir(id)))
    }

    pub fn user_image(&self, q: usize) -> PathBuf {
        self.root.join("user").join("images").join(format!("q{q:03}.assh"))
    }

    pub fn user_results(&self) -> PathBuf {
        self.root.join("user").join("results.json")
    }

    pub fn oracle_decisions(&self) -> PathBuf {
        self.root.join("oracle").join("decisions.json")
    }

    pub fn oracle_screening(&self) -> PathBuf {
        self.root.join("oracle").join("screening.json")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, data)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Op {
    Build,
    Query,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Build => "build",
            Op::Query => "query",
        }
    }

    fn dealer_op(self) -> u64 {
        match self {
            Op::Build => 0,
            Op::Query => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartyArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    /// Both servers in this process over an in-memory channel.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    Trapdoor,
    Decrypt,
}

fn both() -> [PartyId; 2] {
    [PartyId::P1, PartyId::P2]
}

pub fn dealer_gen(cfg: &SessionConfig, layout: &Layout, count: usize, out: &mut dyn Write) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let model = cfg.pipeline.model(&cfg.seeds);
    let plans = [
        (Op::Build, build_plan(&cfg.pipeline, &model, cfg.corpus_n)?),
        (Op::Query, query_plan(&cfg.pipeline, &model, cfg.corpus_n, count, cfg.baseline)?),
    ];
    for (op, plan) in plans {
        let dealer = Dealer::new(op_seed(cfg.seeds.dealer, op.dealer_op()), cfg.pipeline.fixed);
        let (m1, m2) = dealer.generate(&plan)?;
        for (id, m) in both().into_iter().zip([m1, m2]) {
            let path = layout.material(id, op);
            ensure_parent(&path)?;
            m.save(&path)?;
        }
        writeln!(out, "{}: material for {} written", op.name(), if op == Op::Build { cfg.corpus_n } else { count })?;
    }
    Ok(())
}

pub fn owner_outsource(cfg: &SessionConfig, layout: &Layout, out: &mut dyn Write) -> Result<()> {
    let p = &cfg.pipeline;
    let mut images = synthetic_corpus(cfg.corpus_n + cfg.corpus_queries, cfg.corpus_classes, p.side, cfg.corpus_seed);
    let queries: Vec<Image> = images
        .split_off(cfg.corpus_n)
        .into_iter()
        .enumerate()
        .map(|(i, q)| Image {
            id: i as u32,
            pixels: q.pixels,
        })
        .collect();
    ensure_parent(&layout.images())?;
    save_images(&layout.images(), &images)?;
    ensure_parent(&layout.queries())?;
    save_images(&layout.queries(), &queries)?;
    let stores = crate::pipeline::outsource(&images, cfg.seeds.owner, &p.fixed)?;
    let model = p.model(&cfg.seeds);
    for id in both() {
        let path = layout.store(id);
        ensure_parent(&path)?;
        stores.get(id).save(&path)?;
        let (json, bin) = layout.model(id);
        model.save(&json, &bin)?;
    }
    writeln!(out, "outsourced {} images, {} queries kept for the user", images.len(), queries.len())?;
    Ok(())
}

fn trapdoor_count(layout: &Layout, id: PartyId) -> usize {
    (0..).take_while(|&q| layout.trapdoor(id, q).exists()).count()
}

fn append_meter(path: &Path, meter: &SessionMeter) -> Result<()> {
    let mut all = match std::fs::read_to_string(path) {
        Ok(text) => SessionMeter::from_csv(&text)?,
        Err(_) => SessionMeter::default(),
    };
    all.merge(meter);
    write_file(path, all.to_csv())
}

/// One server's side of a session, after the channel is up.
pub fn serve(cfg: &SessionConfig, layout: &Layout, id: PartyId, mut session: Session, op: Op) -> Result<String> {
    handshake(&mut session, &cfg.hash())?;
    let material = PartyMaterial::load(&layout.material(id, op))?;
    let seed = match id {
        PartyId::P1 => cfg.seeds.servers.0,
        PartyId::P2 => cfg.seeds.servers.1,
    };
    let mut p = Party::new(id, cfg.pipeline.fixed, session, material, seed);
    let model = PublicModel::load(&layout.model(id).0)?;
    let store = ShareStore::load(&layout.store(id))?;
    if store.owner != id {
        return Err(Error::Config(format!("{} holds the other server's shares", party_dir(id))));
    }
    let summary = match op {
        Op::Build => {
            let state = server_build(&mut p, &store, &model, &cfg.pipeline, &cfg.seeds)?;
            let path = layout.state(id);
            ensure_parent(&path)?;
            state.to_file(&cfg.pipeline.hkm_params(&cfg.seeds)).save(&path)?;
            write_file(&layout.decisions(id), DecisionLog::new(&state.t, &state.index).to_json())?;
            format!("built {} index over {} images", state.index.kind().name(), store.ids.len())
        }
        Op::Query => {
            let state = ServerState::from_file(&ShareFile::load(&layout.state(id))?)?;
            let count = trapdoor_count(layout, id);
            p.session.set_stage("handshake");
            let peer = p.session.exchange((count as u64).to_le_bytes().to_vec())?;
            if peer != (count as u64).to_le_bytes() {
                return Err(Error::ProtocolViolation("servers hold different numbers of trapdoors".into()));
            }
            let mut decisions = Vec::with_capacity(count);
            for q in 0..count {
                let t = ShareStore::load(&layout.trapdoor(id, q))?;
                let query = t.images.first().ok_or_else(|| Error::Format("empty trapdoor".into()))?;
                let o = server_query(&mut p, &state, &store, &model, &cfg.pipeline, query, cfg.m, cfg.baseline)?;
                let res = ShareStore {
                    owner: id,
                    ids: o.search.top.clone(),
                    images: o.images.clone(),
                };
                let path = layout.result(id, q);
                ensure_parent(&path)?;
                res.save(&path)?;
                decisions.push(QueryDecision::from(&o));
            }
            let mut log = DecisionLog::from_json(&std::fs::read_to_string(layout.decisions(id))?)?;
            log.queries = decisions;
            write_file(&layout.decisions(id), log.to_json())?;
            format!("answered {count} queries")
        }
    };
    append_meter(&layout.meter(id), &p.session.take_meter())?;
    Ok(format!("{}: {summary}", party_dir(id)))
}

fn connect_retry(addr: &str, timeout: Duration) -> Result<TcpChannel> {
    let start = Instant::now();
    loop {
        match TcpChannel::connect(addr, timeout) {
            Ok(c) => return Ok(c),
            Err(_) if start.elapsed() < timeout => std::thread::sleep(Duration::from_millis(50)),
            Err(_) => return Err(Error::Timeout),
        }
    }
}

pub fn server_run(cfg: &SessionConfig, layout: &Layout, party: PartyArg, op: Op, out: &mut dyn Write) -> Result<()> {
    // independent of the config, so a mismatch surfaces in the handshake
    let sid = op.dealer_op();
    let lines = match (party, &cfg.transport) {
        (PartyArg::Both, _) => {
            let (c1, c2) = InProcChannel::pair(cfg.timeout);
            let (s1, s2) = (Session::new(sid, Box::new(c1)), Session::new(sid, Box::new(c2)));
            let (a, b) = std::thread::scope(|s| {
                let h = s.spawn(|| serve(cfg, layout, PartyId::P2, s2, op));
                let a = serve(cfg, layout, PartyId::P1, s1, op);
                (a, h.join().expect("server thread panicked"))
            });
            match (a, b) {
                (Ok(a), Ok(b)) => vec![a, b],
                (Err(Error::PeerClosed), Err(e)) | (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        (_, Transport::InProc) => {
            return Err(Error::Config("transport = inproc runs both servers: use --party both".into()))
        }
        (PartyArg::One, Transport::Tcp(addr)) => {
            let listener = TcpListener::bind(addr)?;
            let ch = TcpChannel::accept(&listener, cfg.timeout)?;
            vec![serve(cfg, layout, PartyId::P1, Session::new(sid, Box::new(ch)), op)?]
        }
        (PartyArg::Two, Transport::Tcp(addr)) => {
            let ch = connect_retry(addr, cfg.timeout)?;
            vec![serve(cfg, layout, PartyId::P2, Session::new(sid, Box::new(ch)), op)?]
        }
    };
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

pub fn user_query(cfg: &SessionConfig, layout: &Layout, phase: Phase, out: &mut dyn Write) -> Result<()> {
    let fixed = &cfg.pipeline.fixed;
    match phase {
        Phase::Trapdoor => {
            let queries = load_images(&layout.queries())?;
            for (q, img) in queries.iter().enumerate() {
                let t = trapdoor(&img.pixels, op_seed(cfg.seeds.owner, 1000 + q as u64), fixed)?;
                for id in both() {
                    let share = ShareStore {
                        owner: id,
                        ids: vec![q as u32],
                        images: vec![t.get(id).clone()],
                    };
                    let path = layout.trapdoor(id, q);
                    ensure_parent(&path)?;
                    share.save(&path)?;
                }
            }
            writeln!(out, "wrote {} trapdoors", queries.len())?;
        }
        Phase::Decrypt => {
            let mut all = Vec::new();
            for q in (0..).take_while(|&q| layout.result(PartyId::P1, q).exists()) {
                let a = ShareStore::load(&layout.result(PartyId::P1, q))?;
                let b = ShareStore::load(&layout.result(PartyId::P2, q))?;
                if a.ids != b.ids {
                    return Err(Error::ProtocolViolation(format!("query {q}: servers returned different ids")));
                }
                let images = crate::pipeline::reconstruct_store(&Pair(a, b), fixed)?;
                let path = layout.user_image(q);
                ensure_parent(&path)?;
                save_images(&path, &images)?;
                let ids: Vec<u32> = images.iter().map(|i| i.id).collect();
                writeln!(out, "query {q}: {ids:?}")?;
                all.push(ids);
            }
            let json = serde_json::to_string_pretty(&all).map_err(|e| Error::Format(e.to_string()))?;
            write_file(&layout.user_results(), json)?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct Screening {
    build_min_gap: f64,
    build_min_boundary: f64,
    query_min_gap: f64,
    query_min_boundary: f64,
}

pub fn oracle_cmd(cfg: &SessionConfig, layout: &Layout, out: &mut dyn Write) -> Result<()> {
    let images = load_images(&layout.images())?;
    let queries = load_images(&layout.queries())?;
    let (o, log) = oracle_run(&cfg.pipeline, &cfg.seeds, &images, &queries, cfg.m, cfg.baseline)?;
    write_file(&layout.oracle_decisions(), log.to_json())?;
    let s = Screening {
        build_min_gap: o.build_plain.min_gap,
        build_min_boundary: o.build_plain.min_boundary,
        query_min_gap: o.query_plain.min_gap,
        query_min_boundary: o.query_plain.min_boundary,
    };
    let json = serde_json::to_string_pretty(&s).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&layout.oracle_screening(), json)?;
    writeln!(out, "oracle: {} images, {} queries", images.len(), queries.len())?;
    Ok(())
}

/// Bytes of the index query path and of the linear-scan baseline.
pub fn query_bytes(meter: &SessionMeter) -> (u64, u64) {
    let index = meter.by_stage(stage::QUERY_COMPRESS).bytes + meter.by_stage(stage::QUERY_SEARCH).bytes;
    (index, meter.by_stage(stage::QUERY_SCAN).bytes)
}

pub fn meter_report(layout: &Layout, out: &mut dyn Write) -> Result<()> {
    for id in both() {
        let path = layout.meter(id);
        let meter = SessionMeter::from_csv(&std::fs::read_to_string(&path)?)?;
        writeln!(out, "# {}", path.display())?;
        write!(out, "{}", meter.to_csv())?;
        let total = meter.total();
        writeln!(
            out,
            "total {} rounds, {} bytes, {} words of {CARRIER_WORD_BITS} bits",
            total.rounds,
            total.bytes,
            total.words()
        )?;
        let (index, scan) = query_bytes(&meter);
        if index > 0 && scan > 0 {
            writeln!(
                out,
                "index query bytes {index}, linear scan bytes {scan}, reduction {:.1}x",
                scan as f64 / index as f64
            )?;
        }
    }
    Ok(())
}

pub fn verify_equivalence(secure: &Path, oracle: &Path, out: &mut dyn Write) -> Result<()> {
    let s = DecisionLog::from_json(&std::fs::read_to_string(secure)?)?;
    let o = DecisionLog::from_json(&std::fs::read_to_string(oracle)?)?;
    let verdicts = compare(&s, &o);
    for (stage, ok) in &verdicts {
        writeln!(out, "{stage}: {}", if *ok { "PASS" } else { "FAIL" })?;
    }
    let failed: Vec<&str> = verdicts.iter().filter(|(_, ok)| !ok).map(|(s, _)| *s).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Equivalence(format!("stages differ: {}", failed.join(", "))))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ppir", version, about = "Two-server privacy-preserving image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate correlated randomness for a build and `count` queries.
    DealerGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Create the corpus and split it into the two servers' stores.
    OwnerOutsource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run one server (or both in-process) for a build or query session.
    ServerRun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum)]
        party: PartyArg,
        #[arg(long, value_enum)]
        op: Op,
    },
    /// Split query images into trapdoors, or decrypt returned results.
    UserQuery {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum)]
        phase: Phase,
    },
    /// Run the plaintext pipeline and write its decision log.
    OracleRun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print both servers' meter.csv and the query byte comparison.
    MeterReport {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Compare a secure decision log with the oracle's, stage by stage.
    VerifyEquivalence {
        #[arg(long)]
        secure: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
    },
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::DealerGen { config, dir, count } => dealer_gen(&SessionConfig::load(&config)?, &Layout::new(dir), count, out),
        Command::OwnerOutsource { config, dir } => owner_outsource(&SessionConfig::load(&config)?, &Layout::new(dir), out),
        Command::ServerRun { config, dir, party, op } => {
            server_run(&SessionConfig::load(&config)?, &Layout::new(dir), party, op, out)
        }
        Command::UserQuery { config, dir, phase } => user_query(&SessionConfig::load(&config)?, &Layout::new(dir), phase, out),
        Command::OracleRun { config, dir } => oracle_cmd(&SessionConfig::load(&config)?, &Layout::new(dir), out),
        Command::MeterReport { dir } => meter_report(&Layout::new(dir), out),
        Command::VerifyEquivalence { secure, oracle } => verify_equivalence(&secure, &oracle, out),
    }
}
