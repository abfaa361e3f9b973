//! Nearest-neighbour inference in the latent space, closed/open accuracy and
//! image retrieval.
//!
//! Test images are clustered in consecutive batches of the configured eval
//! batch size, in dataset order, so results depend on that partition.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::model::ModelState;
use crate::composition::Composition;
use crate::datasets::{FeaturePack, Split};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};
use crate::objectives::{MaskKind, MaskMatrix};
use crate::visual::{VisualFeatures, VisualStage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Candidates are the unseen compositions only.
    Closed,
    /// Candidates are every composition in the pack.
    Open,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Metric::Closed),
            "open" => Ok(Metric::Open),
            other => Err(Error::Config(format!("unknown metric `{other}` (closed, open)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Closed => "closed",
            Metric::Open => "open",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub candidate: usize,
    pub distance: f64,
}

/// For every query row, the candidate row at minimum Euclidean distance.
/// Ties go to the lowest candidate index.
pub fn nearest_candidates(queries: &Tensor, candidates: &Tensor) -> Result<Vec<Match>> {
    if candidates.rows() == 0 {
        return Err(Error::Contract("empty candidate set".into()));
    }
    if queries.cols() != candidates.cols() {
        return Err(Error::dim("nearest_candidates", queries.shape(), candidates.shape()));
    }
    Ok((0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            let mut best = Match {
                candidate: 0,
                distance: f64::INFINITY,
            };
            for j in 0..candidates.rows() {
                let d2: f64 = q.iter().zip(candidates.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.distance {
                    best = Match {
                        candidate: j,
                        distance: d2,
                    };
                }
            }
            best.distance = best.distance.sqrt();
            best
        })
        .collect())
}

/// `h = 2co / (c + o)`, or 0 when both are 0.
pub fn h_mean(closed: f64, open: f64) -> f64 {
    if closed + open > 0.0 {
        2.0 * closed * open / (closed + open)
    } else {
        0.0
    }
}

/// Candidate compositions for `metric` when evaluating `split`. The closed set
/// is the split's own compositions and must not contain a training one.
pub fn candidate_set(pack: &FeaturePack, split: Split, metric: Metric) -> Result<Vec<Composition>> {
    let set = match metric {
        Metric::Closed => {
            let set = pack.compositions(split);
            if split != Split::Train {
                let train = pack.compositions(Split::Train);
                if let Some(c) = set.iter().find(|c| train.binary_search(c).is_ok()) {
                    return Err(Error::SplitOverlap(format!(
                        "training composition {} is in the closed candidate set",
                        c.label(&pack.attributes, &pack.objects)
                    )));
                }
            }
            set
        }
        Metric::Open => pack.all_compositions(),
    };
    if set.is_empty() {
        return Err(Error::Contract(format!("empty {metric} candidate set for the {split:?} split")));
    }
    Ok(set)
}

/// `Y^test · Z`: one latent vector per candidate composition.
pub fn candidate_embeddings(model: &ModelState, comps: &[Composition], z: &Tensor) -> Result<Tensor> {
    let y = MaskMatrix::from_compositions(
        comps,
        model.dims.attribute_count,
        model.dims.object_count,
        MaskKind::Candidate,
    )?;
    matmul(&y.weights(model.config().loss.pooling), z)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub candidate: usize,
    pub composition: Composition,
    pub distance: f64,
}

fn eval_clusters(model: &ModelState) -> bool {
    model.config().eval.cluster && model.visual.config.clustering
}

/// Predicts one batch of initial features; the batch is clustered as a whole.
pub fn predict(model: &ModelState, batch: &VisualFeatures, metric: Metric, pack: &FeaturePack) -> Result<Vec<Prediction>> {
    if batch.stage != VisualStage::Initial {
        return Err(Error::Contract(format!("predict expects initial features, got {:?}", batch.stage)));
    }
    let comps = candidate_set(pack, Split::Test, metric)?;
    let z = model.node_latents(pack)?;
    let cands = candidate_embeddings(model, &comps, &z)?;
    let xc = model.latent_features(&batch.tensor, eval_clusters(model))?;
    Ok(nearest_candidates(&xc, &cands)?
        .into_iter()
        .map(|m| Prediction {
            candidate: m.candidate,
            composition: comps[m.candidate].clone(),
            distance: m.distance,
        })
        .collect())
}

/// `Xᶜ` for the images `indices`, clustered in consecutive chunks.
pub fn batched_latents(model: &ModelState, pack: &FeaturePack, indices: &[usize]) -> Result<Tensor> {
    model.check_pack(pack)?;
    let b = model.config().eval_batch_size();
    let cluster = eval_clusters(model);
    let mut out = Vec::with_capacity(indices.len() * model.latent_dim());
    for chunk in indices.chunks(b) {
        let xc = model.latent_features(&pack.visual.select_rows(chunk), cluster)?;
        out.extend_from_slice(xc.data());
    }
    Tensor::from_vec(indices.len(), model.latent_dim(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompositionScore {
    pub composition: Composition,
    pub label: String,
    pub images: usize,
    pub closed_top1: f64,
    pub open_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub closed_top1: f64,
    pub open_top1: f64,
    pub h_mean: f64,
    pub closed_candidates: usize,
    pub open_candidates: usize,
    pub images: usize,
    pub eval_batch_size: usize,
    pub clustered: bool,
    pub per_composition: Vec<CompositionScore>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:?} split: {} images, eval batch {}, clustering {}",
            self.split,
            self.images,
            self.eval_batch_size,
            if self.clustered { "on" } else { "off" }
        )?;
        writeln!(f, "closed  {:6.2}%  ({} candidates)", self.closed_top1, self.closed_candidates)?;
        writeln!(f, "open    {:6.2}%  ({} candidates)", self.open_top1, self.open_candidates)?;
        writeln!(f, "h-mean  {:6.2}%", self.h_mean)?;
        let width = self.per_composition.iter().map(|c| c.label.len()).max().unwrap_or(0).max(11);
        writeln!(f, "{:<width$}  {:>6}  {:>7}  {:>7}", "composition", "images", "closed", "open")?;
        for c in &self.per_composition {
            writeln!(
                f,
                "{:<width$}  {:>6}  {:>6.1}%  {:>6.1}%",
                c.label, c.images, c.closed_top1, c.open_top1
            )?;
        }
        Ok(())
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Closed/open top-1 accuracy on the test split.
pub fn evaluate(model: &ModelState, pack: &FeaturePack) -> Result<EvalReport> {
    evaluate_split(model, pack, Split::Test)
}

/// Closed/open top-1 accuracy on `split`; a prediction is correct only when
/// its full composition equals the label.
pub fn evaluate_split(model: &ModelState, pack: &FeaturePack, split: Split) -> Result<EvalReport> {
    let indices = pack.indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("the {split:?} split is empty")));
    }
    let closed = candidate_set(pack, split, Metric::Closed)?;
    let open = candidate_set(pack, split, Metric::Open)?;
    let z = model.node_latents(pack)?;
    let xc = batched_latents(model, pack, &indices)?;
    let closed_hits = nearest_candidates(&xc, &candidate_embeddings(model, &closed, &z)?)?;
    let open_hits = nearest_candidates(&xc, &candidate_embeddings(model, &open, &z)?)?;

    let mut table: Vec<(Composition, usize, usize, usize)> =
        closed.iter().map(|c| (c.clone(), 0, 0, 0)).collect();
    let (mut closed_ok, mut open_ok) = (0, 0);
    for (k, &i) in indices.iter().enumerate() {
        let truth = pack.images[i].composition();
        let c_ok = closed[closed_hits[k].candidate] == truth;
        let o_ok = open[open_hits[k].candidate] == truth;
        closed_ok += c_ok as usize;
        open_ok += o_ok as usize;
        if let Ok(row) = closed.binary_search(&truth) {
            table[row].1 += 1;
            table[row].2 += c_ok as usize;
            table[row].3 += o_ok as usize;
        }
    }
    let closed_top1 = percent(closed_ok, indices.len());
    let open_top1 = percent(open_ok, indices.len());
    Ok(EvalReport {
        split,
        closed_top1,
        open_top1,
        h_mean: h_mean(closed_top1, open_top1),
        closed_candidates: closed.len(),
        open_candidates: open.len(),
        images: indices.len(),
        eval_batch_size: model.config().eval_batch_size(),
        clustered: eval_clusters(model),
        per_composition: table
            .into_iter()
            .map(|(c, n, ch, oh)| CompositionScore {
                label: c.label(&pack.attributes, &pack.objects),
                composition: c,
                images: n,
                closed_top1: percent(ch, n),
                open_top1: percent(oh, n),
            })
            .collect(),
    })
}

/// Parses `attr1,attr2:object` against the pack's vocabulary.
pub fn parse_query(pack: &FeaturePack, query: &str) -> Result<Composition> {
    let (attrs, obj) = query
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("query `{query}` must look like `attr1,attr2:object`")))?;
    let attrs = attrs
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| pack.attribute_index(a))
        .collect::<Result<Vec<_>>>()?;
    if attrs.is_empty() {
        return Err(Error::Config(format!("query `{query}` names no attribute")));
    }
    Ok(Composition::new(attrs, pack.object_index(obj.trim())?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub distance: f64,
}

/// Test images ranked by distance to the query composition's latent vector.
/// The query need not occur in any split.
pub fn retrieve(model: &ModelState, pack: &FeaturePack, query: &Composition, top_k: usize) -> Result<Vec<Hit>> {
    let indices = pack.indices(Split::Test);
    let z = model.node_latents(pack)?;
    let q = candidate_embeddings(model, std::slice::from_ref(query), &z)?;
    let xc = batched_latents(model, pack, &indices)?;
    let mut hits: Vec<Hit> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| Hit {
            index: i,
            id: pack.images[i].id.clone(),
            distance: xc
                .row(k)
                .iter()
                .zip(q.row(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    hits.truncate(top_k);
    Ok(hits)
}
