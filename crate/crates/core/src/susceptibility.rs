//! Associative filter ranking: per-filter earth mover's distance between
//! activation maps of clean and distorted versions of the same image,
//! aggregated over images by a truncated Borda count.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CapturePoint, Network};
use crate::rng::{rng_from, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest grid (in cells) accepted by [`emd_exact_2d`].
pub const EXACT_MAX_CELLS: usize = 16 * 16;
/// Positions that score in each image's vote.
pub const BORDA_DEPTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmdMetric {
    #[default]
    Marginal,
    Exact,
}

impl std::fmt::Display for EmdMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmdMetric::Marginal => "marginal",
            EmdMetric::Exact => "exact",
        })
    }
}

impl std::str::FromStr for EmdMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(EmdMetric::Marginal),
            "exact" => Ok(EmdMetric::Exact),
            other => Err(Error::Config(format!("unknown EMD metric `{other}`"))),
        }
    }
}

/// Eval-mode activations of conv layer `layer_id` (1-based) at `capture`,
/// shaped `[B, F, H, W]`.
pub fn extract_activations<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    layer_id: usize,
    capture: CapturePoint,
) -> Result<Tensor<T>> {
    let info = net.conv_layer(layer_id)?;
    net.forward_eval_through(images, info.capture_index(capture))
}

/// Turns a non-negative map into a distribution: `(v + ε) / Σ(v + ε)` with
/// `ε = 1e-12 · max(1, max v)`. Maps with negative entries are first shifted
/// by their minimum.
pub fn normalize_map(map: &[f64]) -> Vec<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let max = map.iter().map(|&v| v + shift).fold(0.0, f64::max);
    let eps = 1e-12 * max.max(1.0);
    let total: f64 = map.iter().map(|&v| v + shift + eps).sum();
    map.iter().map(|&v| (v + shift + eps) / total).collect()
}

fn check_distributions(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Usage(format!(
            "distributions have different or empty supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Usage(format!(
                "{name} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

fn emd_1d_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut cdf = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len() - 1) {
        cdf += a - b;
        total += cdf.abs();
    }
    total
}

/// 1-Wasserstein distance on `0..n` with unit spacing.
pub fn emd_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distributions(p, q)?;
    Ok(emd_1d_unchecked(p, q))
}

fn marginals(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; h];
    let mut cols = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            rows[y] += p[y * w + x];
            cols[x] += p[y * w + x];
        }
    }
    (rows, cols)
}

fn check_grid(p: &[f64], q: &[f64], h: usize, w: usize) -> Result<()> {
    check_distributions(p, q)?;
    if p.len() != h * w {
        return Err(Error::Usage(format!("{} cells do not form a {h}x{w} grid", p.len())));
    }
    Ok(())
}

/// Lower bound on [`emd_exact_2d`] from the row and column marginals:
/// `sqrt(W_rows² + W_cols²)`, where each term is the 1D distance between
/// the corresponding marginals.
pub fn emd_marginal(p: &[f64], q: &[f64], h: usize, w: usize) -> Result<f64> {
    check_grid(p, q, h, w)?;
    let (pr, pc) = marginals(p, h, w);
    let (qr, qc) = marginals(q, h, w);
    let r = emd_1d_unchecked(&pr, &qr);
    let c = emd_1d_unchecked(&pc, &qc);
    Ok((r * r + c * c).sqrt())
}

/// Optimal transport cost between two distributions on an `h × w` grid with
/// Euclidean ground distance between cell centers.
///
/// Mass common to both distributions stays in place (optimal for a metric
/// cost); the remaining excess is routed by successive shortest paths with
/// Dijkstra on reduced costs over the dense bipartite residual graph.
pub fn emd_exact_2d(p: &[f64], q: &[f64], h: usize, w: usize) -> Result<f64> {
    if h * w > EXACT_MAX_CELLS {
        return Err(Error::Capability(format!(
            "exact EMD supports grids up to {EXACT_MAX_CELLS} cells, got {h}x{w}; use the marginal metric"
        )));
    }
    check_grid(p, q, h, w)?;
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..p.len() {
        let d = p[i] / sp - q[i] / sq;
        if d > 0.0 {
            src.push((i, d));
        } else if d < 0.0 {
            dst.push((i, -d));
        }
    }
    if src.is_empty() || dst.is_empty() {
        return Ok(0.0);
    }
    let cell = |i: usize| ((i / w) as f64, (i % w) as f64);
    let (m, k) = (src.len(), dst.len());
    let cost: Vec<f64> = src
        .iter()
        .flat_map(|&(a, _)| {
            dst.iter().map(move |&(b, _)| {
                let ((ya, xa), (yb, xb)) = (cell(a), cell(b));
                ((ya - yb).powi(2) + (xa - xb).powi(2)).sqrt()
            })
        })
        .collect();
    let mut supply: Vec<f64> = src.iter().map(|s| s.1).collect();
    let mut demand: Vec<f64> = dst.iter().map(|d| d.1).collect();
    let mut flow = vec![0.0f64; m * k];
    // Nodes 0..m are sources, m..m+k are sinks.
    let mut pot = vec![0.0f64; m + k];
    let tol = 1e-15;
    let mut remaining: f64 = supply.iter().sum();
    while remaining > 1e-13 {
        let mut dist = vec![f64::INFINITY; m + k];
        let mut parent = vec![usize::MAX; m + k];
        let mut done = vec![false; m + k];
        for u in 0..m {
            if supply[u] > tol {
                dist[u] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            for v in 0..m + k {
                if !done[v] && dist[v].is_finite() && (best == usize::MAX || dist[v] < dist[best]) {
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < m {
                let u = best;
                for j in 0..k {
                    let v = m + j;
                    let nd = dist[u] + cost[u * k + j] + pot[u] - pot[v];
                    if !done[v] && nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                    }
                }
            } else {
                let j = best - m;
                for u in 0..m {
                    if flow[u * k + j] > tol {
                        let nd = dist[best] - cost[u * k + j] + pot[best] - pot[u];
                        if !done[u] && nd < dist[u] {
                            dist[u] = nd;
                            parent[u] = best;
                        }
                    }
                }
            }
        }
        let Some(t) = (0..k)
            .filter(|&j| demand[j] > tol && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
        else {
            break;
        };
        let t = m + t;
        let mut amount = demand[t - m];
        let mut v = t;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u >= m {
                // Reverse arc: cancels flow on source v → sink u.
                amount = amount.min(flow[v * k + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let mut v = t;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u < m {
                flow[u * k + (v - m)] += amount;
            } else {
                flow[v * k + (u - m)] -= amount;
            }
            v = u;
        }
        supply[v] -= amount;
        demand[t - m] -= amount;
        remaining -= amount;
        let dt = dist[t];
        for (p, &d) in pot.iter_mut().zip(&dist) {
            *p += d.min(dt);
        }
    }
    Ok(flow.iter().zip(&cost).map(|(f, c)| f.max(0.0) * c).sum())
}

/// Distance between two raw maps after [`normalize_map`].
pub fn map_distance(a: &[f64], b: &[f64], h: usize, w: usize, metric: EmdMetric) -> Result<f64> {
    let (p, q) = (normalize_map(a), normalize_map(b));
    match metric {
        EmdMetric::Marginal => emd_marginal(&p, &q, h, w),
        EmdMetric::Exact => emd_exact_2d(&p, &q, h, w),
    }
}

/// Per-filter distances between two `[F, H, W]` activation stacks.
pub fn filter_distances(
    a: &[f64],
    b: &[f64],
    filters: usize,
    h: usize,
    w: usize,
    metric: EmdMetric,
) -> Result<Vec<f64>> {
    let plane = h * w;
    if a.len() != filters * plane || b.len() != a.len() {
        return Err(Error::Usage("activation stacks do not match the layer geometry".into()));
    }
    (0..filters)
        .map(|f| {
            map_distance(
                &a[f * plane..(f + 1) * plane],
                &b[f * plane..(f + 1) * plane],
                h,
                w,
                metric,
            )
        })
        .collect()
}

/// `N × F` matrix of per-image, per-filter distances for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub layer_id: usize,
    pub metric: EmdMetric,
    pub image_ids: Vec<u64>,
    pub filters: usize,
    /// Row-major `N × F`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(
        layer_id: usize,
        metric: EmdMetric,
        image_ids: Vec<u64>,
        filters: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if image_ids.is_empty() || filters == 0 || values.len() != image_ids.len() * filters {
            return Err(Error::Input(format!(
                "distance matrix needs N ≥ 1 rows of {filters} values; got {} values for {} images",
                values.len(),
                image_ids.len()
            )));
        }
        if values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Numeric(
                "distance matrix entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            layer_id,
            metric,
            image_ids,
            filters,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.filters..(i + 1) * self.filters]
    }

    pub fn mean_distances(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.filters];
        for i in 0..self.rows() {
            for (m, &v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows() as f64);
        mean
    }

    /// CSV with an `image_id` column and one column per filter.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["image_id".to_string()];
        header.extend((0..self.filters).map(|f| format!("f{f}")));
        w.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec = vec![self.image_ids[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const CHUNK: usize = 64;

/// Distances for index-aligned clean/distorted image pairs.
pub fn compute_distance_matrix<T: Scalar>(
    net: &Network<T>,
    clean: &Tensor<T>,
    distorted: &Tensor<T>,
    image_ids: &[u64],
    layer_id: usize,
    metric: EmdMetric,
    capture: CapturePoint,
) -> Result<DistanceMatrix> {
    let n = clean.batch();
    if clean.shape() != distorted.shape() || image_ids.len() != n {
        return Err(Error::Usage(format!(
            "pairs are not aligned: clean {:?}, distorted {:?}, {} ids",
            clean.shape(),
            distorted.shape(),
            image_ids.len()
        )));
    }
    let info = net.conv_layer(layer_id)?;
    let (f, h, w) = (info.filters, info.out_height, info.out_width);
    if metric == EmdMetric::Exact && h * w > EXACT_MAX_CELLS {
        return Err(Error::Capability(format!(
            "layer {layer_id} maps are {h}x{w}; exact EMD supports up to {EXACT_MAX_CELLS} cells, use the marginal metric"
        )));
    }
    let mut values = Vec::with_capacity(n * f);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let a = extract_activations(net, &clean.slice_batch(start, end), layer_id, capture)?.to_f64_vec();
        let b = extract_activations(net, &distorted.slice_batch(start, end), layer_id, capture)?.to_f64_vec();
        let per = f * h * w;
        let rows: Vec<Vec<f64>> = (0..end - start)
            .into_par_iter()
            .map(|i| {
                filter_distances(&a[i * per..(i + 1) * per], &b[i * per..(i + 1) * per], f, h, w, metric)
                    .map_err(|e| Error::Input(format!("pair {} (image id {}): {e}", start + i, image_ids[start + i])))
            })
            .collect::<Result<_>>()?;
        values.extend(rows.into_iter().flatten());
    }
    DistanceMatrix::new(layer_id, metric, image_ids.to_vec(), f, values)
}

/// Which rule decided a filter's position relative to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// First position, or a strictly lower score than the predecessor.
    Score,
    MeanDistance,
    Index,
}

/// Filters ordered from most to least susceptible.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRanking {
    pub layer_id: usize,
    pub order: Vec<usize>,
    /// Borda score per filter index.
    pub scores: Vec<u64>,
    /// Mean distance per filter index.
    pub mean_distance: Vec<f64>,
    /// Rule that placed `order[i]` after `order[i - 1]`.
    pub tie_breaks: Vec<TieBreak>,
}

impl FilterRanking {
    pub fn filters(&self) -> usize {
        self.order.len()
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    /// CSV with columns `rank,filter_index,borda_score,mean_distance`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "filter_index", "borda_score", "mean_distance"])?;
        for (r, &f) in self.order.iter().enumerate() {
            w.write_record([
                (r + 1).to_string(),
                f.to_string(),
                self.scores[f].to_string(),
                self.mean_distance[f].to_string(),
            ])?;
        }
        finish_csv(w)
    }

    /// Parses [`FilterRanking::to_csv`] output.
    pub fn from_csv(layer_id: usize, text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows: Vec<(usize, u64, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::format("ranking", "missing column"));
            let parse_err = |e: &dyn std::fmt::Display| Error::format("ranking", e.to_string());
            rows.push((
                field(1)?.parse().map_err(|e| parse_err(&e))?,
                field(2)?.parse().map_err(|e| parse_err(&e))?,
                field(3)?.parse().map_err(|e| parse_err(&e))?,
            ));
        }
        let f = rows.len();
        let mut seen = vec![false; f];
        let mut scores = vec![0; f];
        let mut mean = vec![0.0; f];
        for &(idx, s, m) in &rows {
            if idx >= f || seen[idx] {
                return Err(Error::format("ranking", "filter indices are not a permutation"));
            }
            seen[idx] = true;
            scores[idx] = s;
            mean[idx] = m;
        }
        let order: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let tie_breaks = tie_record(&order, &scores, &mean);
        Ok(Self {
            layer_id,
            order,
            scores,
            mean_distance: mean,
            tie_breaks,
        })
    }
}

/// Each row votes: filters sorted by distance descending (ties to the lower
/// index) receive 10, 9, …, 1 points for the first ten positions.
pub fn borda_scores(d: &DistanceMatrix) -> Vec<u64> {
    let f = d.filters;
    let depth = BORDA_DEPTH.min(f);
    let votes: Vec<Vec<u64>> = (0..d.rows())
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let mut idx: Vec<usize> = (0..f).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut pts = vec![0u64; f];
            for (pos, &j) in idx.iter().take(depth).enumerate() {
                pts[j] = (BORDA_DEPTH - pos) as u64;
            }
            pts
        })
        .collect();
    let mut scores = vec![0u64; f];
    for v in votes {
        for (s, p) in scores.iter_mut().zip(v) {
            *s += p;
        }
    }
    scores
}

fn tie_record(order: &[usize], scores: &[u64], mean: &[f64]) -> Vec<TieBreak> {
    order
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            if r == 0 {
                return TieBreak::Score;
            }
            let prev = order[r - 1];
            if scores[prev] != scores[f] {
                TieBreak::Score
            } else if mean[prev] != mean[f] {
                TieBreak::MeanDistance
            } else {
                TieBreak::Index
            }
        })
        .collect()
}

/// Orders filters by score descending, then mean distance descending, then
/// index ascending.
pub fn rank_from_scores(layer_id: usize, scores: Vec<u64>, mean_distance: Vec<f64>) -> FilterRanking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .cmp(&scores[a])
            .then(mean_distance[b].total_cmp(&mean_distance[a]))
            .then(a.cmp(&b))
    });
    let tie_breaks = tie_record(&order, &scores, &mean_distance);
    FilterRanking {
        layer_id,
        order,
        scores,
        mean_distance,
        tie_breaks,
    }
}

/// Truncated Borda aggregation of the per-image votes in `d`.
pub fn borda_rank(d: &DistanceMatrix) -> FilterRanking {
    rank_from_scores(d.layer_id, borda_scores(d), d.mean_distances())
}

/// Ranking from a single distance vector (one voter).
pub fn rank_by_distance(layer_id: usize, distances: &[f64]) -> Result<FilterRanking> {
    let d = DistanceMatrix::new(
        layer_id,
        EmdMetric::Marginal,
        vec![0],
        distances.len(),
        distances.to_vec(),
    )?;
    Ok(borda_rank(&d))
}

/// Share of all Borda points held by the top `max(1, floor(fraction·F))`
/// filters.
pub fn borda_mass_share(ranking: &FilterRanking, fraction: f64) -> Result<f64> {
    let k = selection_size(ranking.filters(), fraction)?;
    let total: u64 = ranking.scores.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let top: u64 = ranking.top(k).iter().map(|&f| ranking.scores[f]).sum();
    Ok(top as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Most,
    Least,
    All,
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::Most => "most",
            SelectionMode::Least => "least",
            SelectionMode::All => "all",
        })
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most" => Ok(SelectionMode::Most),
            "least" => Ok(SelectionMode::Least),
            "all" => Ok(SelectionMode::All),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSelection {
    pub layer_id: usize,
    pub mode: SelectionMode,
    pub fraction: f64,
    pub filters: usize,
    /// Selected filter indices, ascending.
    pub selected: Vec<usize>,
}

impl FilterSelection {
    /// Channel flags of length F.
    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.filters];
        for &s in &self.selected {
            flags[s] = true;
        }
        flags
    }
}

/// `max(1, floor(fraction · F))`.
pub fn selection_size(filters: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    // The small epsilon keeps products such as 0.3 · 10 from flooring to 2.
    Ok(((fraction * filters as f64 + 1e-9).floor() as usize).clamp(1, filters))
}

pub fn select_filters(ranking: &FilterRanking, mode: SelectionMode, fraction: f64) -> Result<FilterSelection> {
    let f = ranking.filters();
    let k = selection_size(f, fraction)?;
    let mut selected: Vec<usize> = match mode {
        SelectionMode::Most => ranking.order[..k].to_vec(),
        SelectionMode::Least => ranking.order[f - k..].to_vec(),
        SelectionMode::All => (0..f).collect(),
    };
    selected.sort_unstable();
    Ok(FilterSelection {
        layer_id: ranking.layer_id,
        mode,
        fraction,
        filters: f,
        selected,
    })
}

/// Seeded sample of `n` distinct indices from `0..len`, ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64, purpose: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Input(format!("requested {n} items from a pool of {len}")));
    }
    let mut idx = sample(&mut rng_from(seed, &[purpose]), len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Seeded choice of analysis pairs.
pub fn sample_pairs(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    sample_indices(len, n.min(len), seed, stream::PAIRS)
}
