//! Plaintext run of the pipeline with the same seeds and parameters, and the
//! public decision logs that both runs produce.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Fx;
use crate::pipeline::{linear_scan, search, Image, IndexData, IndexKind, PipelineConfig, QueryOutput, Seeds, ServerState};
use crate::secindex::{c2lsh_build, hkm_build, lsh_plain, rows, HkmNode, LshIndex, Plain};
use crate::secpca::{canonical_sign, plain_pca, rebuild_masks, top_eigenpairs};
use crate::securenn::PublicModel;
use crate::testing::Pair;

/// Public shape of an HKM tree: leaf ids and nesting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeShape>,
}

impl TreeShape {
    pub fn of(node: &HkmNode) -> TreeShape {
        TreeShape {
            ids: node.ids.clone(),
            children: node.children.iter().map(TreeShape::of).collect(),
        }
    }
}

/// Bucket table of one hash function: `(bucket, ids)` in bucket order.
pub type Table = Vec<(i64, Vec<u32>)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub candidates: Vec<u32>,
    pub top: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<Vec<u32>>,
}

impl From<&QueryOutput> for QueryDecision {
    fn from(o: &QueryOutput) -> Self {
        QueryDecision {
            candidates: o.search.candidates.clone(),
            top: o.search.top.clone(),
            scan: o.scan.clone(),
        }
    }
}

/// Every public decision of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub kind: IndexKind,
    /// Columns of the public eigenvector matrix, each scaled to unit norm
    /// with its largest entry positive.
    pub pca_t: Vec<Vec<Fx>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<Vec<Table>>,
    pub queries: Vec<QueryDecision>,
}

fn unit_columns(t: &DMatrix<Fx>) -> Vec<Vec<Fx>> {
    t.column_iter()
        .map(|c| {
            let n = c.norm();
            let mut v: Vec<Fx> = c.iter().map(|x| x / n).collect();
            canonical_sign(&mut v);
            v
        })
        .collect()
}

fn tables_of(ix: &LshIndex) -> Vec<Table> {
    ix.tables
        .iter()
        .map(|t| t.iter().map(|(&b, ids)| (b, ids.clone())).collect())
        .collect()
}

impl DecisionLog {
    pub fn new(t: &DMatrix<Fx>, index: &IndexData) -> DecisionLog {
        let (tree, tables) = match index {
            IndexData::Hkm(root) => (Some(TreeShape::of(root)), None),
            IndexData::Lsh(ix) => (None, Some(tables_of(ix))),
        };
        DecisionLog {
            kind: index.kind(),
            pca_t: unit_columns(t),
            tree,
            tables,
            queries: Vec::new(),
        }
    }

    /// The log of a secure run, from P1's state (P2 holds the same public
    /// values).
    pub fn secure(state: &ServerState, queries: &[Pair<QueryOutput>]) -> DecisionLog {
        let mut log = DecisionLog::new(&state.t, &state.index);
        log.queries = queries.iter().map(|q| QueryDecision::from(&q.0)).collect();
        log
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn from_json(s: &str) -> Result<DecisionLog> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("decision log: {e}")))
    }
}

/// Largest tolerated `1 − |cos|` between matching eigenvector columns.
pub const PCA_TOLERANCE: f64 = 1e-6;

/// Per-stage verdicts of a secure-versus-oracle comparison.
pub fn compare(secure: &DecisionLog, oracle: &DecisionLog) -> Vec<(&'static str, bool)> {
    let pca = secure.pca_t.len() == oracle.pca_t.len()
        && secure.pca_t.iter().zip(&oracle.pca_t).all(|(a, b)| {
            a.len() == b.len() && 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() <= PCA_TOLERANCE
        });
    let index = secure.kind == oracle.kind && secure.tree == oracle.tree && secure.tables == oracle.tables;
    let query = secure.queries == oracle.queries;
    vec![("pca", pca), ("index", index), ("query", query)]
}

/// The oracle's counterpart of the server state, in the clear.
pub struct OracleState {
    pub mean: Vec<Fx>,
    pub v: DMatrix<Fx>,
    pub t: DMatrix<Fx>,
    pub features: Vec<Vec<Fx>>,
    pub raw: Vec<Vec<Fx>>,
    pub index: IndexData,
}

/// Plaintext pipeline plus closeness statistics for every decision.
pub struct Oracle {
    pub cfg: PipelineConfig,
    pub seeds: Seeds,
    pub model: PublicModel,
    pub state: OracleState,
    /// Screening statistics of the build.
    pub build_plain: Plain,
    /// Screening statistics of all queries so far.
    pub query_plain: Plain,
}

fn scaled_features(model: &PublicModel, img: &Image, scale: Fx) -> Result<Vec<Fx>> {
    let (f, _) = model.forward_plain(&img.pixels)?;
    Ok(f.into_iter().map(|v| v * scale).collect())
}

impl Oracle {
    pub fn build(cfg: &PipelineConfig, seeds: &Seeds, images: &[Image]) -> Result<Oracle> {
        let model = cfg.model(seeds);
        let raw = images
            .iter()
            .map(|img| scaled_features(&model, img, cfg.feature_scale))
            .collect::<Result<Vec<_>>>()?;
        let d = model.feature_dim()?;
        let x = DMatrix::from_fn(raw.len(), d, |i, j| raw[i][j]);
        let (p, t_scale) = rebuild_masks(seeds.servers.0, seeds.servers.1, d, &cfg.fixed)?;
        let (mean, v) = plain_pca(&x, cfg.s, Some(&p))?;

        let mut xc = x.clone();
        for (j, m) in mean.iter().enumerate() {
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let p_inv = p.clone().try_inverse().ok_or(Error::SingularP)?;
        let y = p_inv * xc.transpose() * &xc * &p * t_scale;
        let (_, t) = top_eigenpairs(&y, cfg.s)?;

        let features = rows(&(&xc * &v));
        let mut plain = Plain::new();
        let index = match cfg.kind {
            IndexKind::Hkm => IndexData::Hkm(hkm_build(&mut plain, &features, &cfg.hkm_params(seeds))?),
            IndexKind::Lsh => {
                let params = cfg.lsh_params(seeds);
                let funcs = lsh_plain(seeds.servers.0, seeds.servers.1, cfg.s, &params, &cfg.fixed);
                IndexData::Lsh(c2lsh_build(&mut plain, funcs, &params, &features)?)
            }
        };
        Ok(Oracle {
            cfg: cfg.clone(),
            seeds: *seeds,
            model,
            state: OracleState {
                mean,
                v,
                t,
                features,
                raw,
                index,
            },
            build_plain: plain,
            query_plain: Plain::new(),
        })
    }

    pub fn query(&mut self, query: &Image, m: usize, baseline: bool) -> Result<QueryDecision> {
        let raw = scaled_features(&self.model, query, self.cfg.feature_scale)?;
        let st = &self.state;
        let q: Vec<Fx> = (0..st.v.ncols())
            .map(|k| raw.iter().zip(&st.mean).zip(st.v.column(k).iter()).map(|((x, m), v)| (x - m) * v).sum())
            .collect();
        let c = &mut self.query_plain;
        let res = search(c, &st.index, &st.features, &q, m)?;
        let scan = if baseline {
            Some(linear_scan(c, &st.raw, &raw, m)?)
        } else {
            None
        };
        Ok(QueryDecision {
            candidates: res.candidates,
            top: res.top,
            scan,
        })
    }

    pub fn log(&self, queries: Vec<QueryDecision>) -> DecisionLog {
        let mut log = DecisionLog::new(&self.state.t, &self.state.index);
        log.queries = queries;
        log
    }
}

/// Run the oracle over a corpus and a list of query images.
pub fn oracle_run(
    cfg: &PipelineConfig,
    seeds: &Seeds,
    images: &[Image],
    queries: &[Image],
    m: usize,
    baseline: bool,
) -> Result<(Oracle, DecisionLog)> {
    let mut o = Oracle::build(cfg, seeds, images)?;
    let qs = queries
        .iter()
        .map(|q| o.query(q, m, baseline))
        .collect::<Result<Vec<_>>>()?;
    let log = o.log(qs);
    Ok((o, log))
}
