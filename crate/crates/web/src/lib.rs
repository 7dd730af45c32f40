//! JSON-in, JSON-out entry points for the static demo page. Each exported
//! function has a plain Rust twin (`*_json`) so it can be tested natively.

use grit_core::grit::{
    build_epoch_schedule, first_epoch_schedule, flush, group_from, CollectorState, GroupingOptions,
    SchedulerStreams, Step, SubQueue,
};
use grit_core::objectives::{consistency_loss, itc_from_scores};
use grit_core::similarity::{row_softmax, Direction, SimilarityMatrix};
use grit_core::{derive_stream, EmbeddingTable, ExampleId, RngStream, StreamLabel};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Debug, Clone, Deserialize)]
pub struct ClusterParams {
    pub examples: usize,
    pub clusters: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Paired unit vectors around per-cluster centres, plus labels.
fn clustered(p: &ClusterParams) -> Result<(EmbeddingTable, EmbeddingTable, Vec<usize>), String> {
    if p.examples == 0 || p.clusters == 0 || p.dim == 0 {
        return Err("examples, clusters and dim must be positive".into());
    }
    let mut rng = derive_stream(p.seed, StreamLabel::DataGen);
    let centres = gauss(&mut rng, p.clusters, p.dim);
    let labels: Vec<usize> = (0..p.examples).map(|i| i % p.clusters).collect();
    let mut shared = gauss(&mut rng, p.examples, p.dim);
    for (i, mut row) in shared.rows_mut().into_iter().enumerate() {
        row *= p.noise;
        row += &centres.row(labels[i]);
    }
    let img = &shared + &(gauss(&mut rng, p.examples, p.dim) * (0.3 * p.noise));
    let txt = &shared + &(gauss(&mut rng, p.examples, p.dim) * (0.3 * p.noise));
    let img = EmbeddingTable::normalized(img).map_err(|e| e.to_string())?;
    let txt = EmbeddingTable::normalized(txt).map_err(|e| e.to_string())?;
    Ok((img, txt, labels))
}

fn gauss(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[derive(Debug, Deserialize)]
struct GroupRequest {
    #[serde(flatten)]
    data: ClusterParams,
    start: usize,
    #[serde(default)]
    first_direction: Direction,
}

#[derive(Debug, Serialize)]
struct GroupResponse {
    /// First two coordinates of each image feature, for plotting.
    points: Vec<[f64; 2]>,
    labels: Vec<usize>,
    chain: Vec<u32>,
    trace: Vec<&'static str>,
    /// Similarity used to pick each element after the start.
    step_scores: Vec<f64>,
}

pub fn group_json(request: &str) -> Result<String, String> {
    let req: GroupRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let (img, txt, labels) = clustered(&req.data)?;
    let sq = SubQueue {
        img: img.view().to_owned(),
        txt: txt.view().to_owned(),
        ids: (0..img.rows()).map(ExampleId::from).collect(),
    };
    let opts = GroupingOptions { first_direction: req.first_direction, ..Default::default() };
    let chain = group_from(&sq, req.start, &opts).map_err(|e| e.to_string())?;
    let s = img.view().dot(&txt.view().t());
    let step_scores = chain
        .positions
        .windows(2)
        .zip(&chain.trace[1..])
        .map(|(w, step)| match step {
            Step::T2V => s[[w[1], w[0]]],
            _ => s[[w[0], w[1]]],
        })
        .collect();
    let resp = GroupResponse {
        points: img.view().rows().into_iter().map(|r| [r[0], r.get(1).copied().unwrap_or(0.0)]).collect(),
        labels,
        chain: chain.ids.iter().map(|i| i.0).collect(),
        trace: chain
            .trace
            .iter()
            .map(|t| match t {
                Step::Start => "start",
                Step::V2T => "v2t",
                Step::T2V => "t2v",
            })
            .collect(),
        step_scores,
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
struct SoftmaxRequest {
    scores: Vec<Vec<f64>>,
    tau: f64,
}

#[derive(Debug, Serialize)]
struct SoftmaxResponse {
    v2t: Vec<Vec<f64>>,
    t2v: Vec<Vec<f64>>,
    itc: f64,
    consistency: f64,
}

pub fn softmax_json(request: &str) -> Result<String, String> {
    let req: SoftmaxRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let n = req.scores.len();
    if req.scores.iter().any(|r| r.len() != n) {
        return Err("scores must be a square matrix".into());
    }
    let flat: Vec<f64> = req.scores.into_iter().flatten().collect();
    let s = Array2::from_shape_vec((n, n), flat).map_err(|e| e.to_string())?;
    let sim = SimilarityMatrix::from_array(s.clone());
    let v2t = row_softmax(&sim, req.tau, Direction::V2T).map_err(|e| e.to_string())?;
    let t2v = row_softmax(&sim, req.tau, Direction::T2V).map_err(|e| e.to_string())?;
    let (itc, p, q, _) = itc_from_scores(s.view(), req.tau).map_err(|e| e.to_string())?;
    let cons = consistency_loss(&p, &q).map_err(|e| e.to_string())?;
    let rows = |m: ndarray::ArrayView2<'_, f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
    serde_json::to_string(&SoftmaxResponse { v2t: rows(v2t.view()), t2v: rows(t2v.view()), itc, consistency: cons.loss })
        .map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
struct ScheduleRequest {
    #[serde(flatten)]
    data: ClusterParams,
    batch_size: usize,
    search_space: usize,
    queue_capacity: usize,
}

#[derive(Debug, Serialize)]
struct ArmReport {
    same_cluster_pairs: f64,
    intra_batch_sim: f64,
    first_batches: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct ScheduleResponse {
    random: ArmReport,
    grit: ArmReport,
}

fn report(batches: &[Vec<ExampleId>], img: &EmbeddingTable, txt: &EmbeddingTable, labels: &[usize]) -> ArmReport {
    let (mut same, mut sim, mut pairs) = (0usize, 0.0, 0usize);
    for b in batches {
        for (x, i) in b.iter().enumerate() {
            for (y, j) in b.iter().enumerate() {
                if x != y {
                    same += (labels[i.index()] == labels[j.index()]) as usize;
                    sim += img.row(i.index()).dot(&txt.row(j.index()));
                    pairs += 1;
                }
            }
        }
    }
    let pairs = pairs.max(1) as f64;
    ArmReport {
        same_cluster_pairs: same as f64 / pairs,
        intra_batch_sim: sim / pairs,
        first_batches: batches.iter().take(6).map(|b| b.iter().map(|i| labels[i.index()]).collect()).collect(),
    }
}

/// Random order versus one GRIT pass over fixed features.
pub fn schedule_json(request: &str) -> Result<String, String> {
    let req: ScheduleRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let (n, m, l) = (req.batch_size, req.search_space, req.queue_capacity);
    if !(2 <= n && n <= m && m <= l) {
        return Err("need 2 <= batch_size <= search_space <= queue_capacity".into());
    }
    let (img, txt, labels) = clustered(&req.data)?;
    let d = img.rows();
    let streams = SchedulerStreams::new(req.data.seed);
    let random = first_epoch_schedule(d, n, 0, &mut streams.random_order(0));

    let mut state = CollectorState::new(l, img.dim());
    let mut order = Vec::with_capacity(d);
    let mut k = 0;
    let opts = GroupingOptions::default();
    for batch in random.batches.iter() {
        for id in batch {
            let r = [id.index()];
            state.collect(&img.select(&r), &txt.select(&r), &[*id]).map_err(|e| e.to_string())?;
            if state.is_full() {
                order.extend(
                    flush(&mut state, m, &opts, &mut streams.example_shuffle(1, k), &mut streams.grouping_start(1, k))
                        .map_err(|e| e.to_string())?,
                );
                k += 1;
            }
        }
    }
    if !state.is_empty() {
        order.extend(
            flush(&mut state, m, &opts, &mut streams.example_shuffle(1, k), &mut streams.grouping_start(1, k))
                .map_err(|e| e.to_string())?,
        );
    }
    let grit = build_epoch_schedule(&order, n, 1, &mut streams.batch_shuffle(1)).map_err(|e| e.to_string())?;
    let resp = ScheduleResponse {
        random: report(&random.batches, &img, &txt, &labels),
        grit: report(&grit.batches, &img, &txt, &labels),
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn group(request: &str) -> Result<String, String> {
    group_json(request)
}

#[wasm_bindgen]
pub fn softmax(request: &str) -> Result<String, String> {
    softmax_json(request)
}

#[wasm_bindgen]
pub fn schedule(request: &str) -> Result<String, String> {
    schedule_json(request)
}
