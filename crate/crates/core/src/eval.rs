//! Cross-modal retrieval evaluation.
//!
//! Metric definitions follow the Princeton Shape Benchmark conventions:
//! `R` is the number of gallery items sharing the query's class.
//!
//! | metric | definition |
//! |--------|------------|
//! | NN     | top-1 item is relevant |
//! | FT     | relevant items in the top `R`, divided by `R` |
//! | ST     | relevant items in the top `2R`, divided by `R` |
//! | E      | F-measure of precision and recall in the top 32 |
//! | DCG    | `rel₁ + Σ_{i≥2} relᵢ / log₂ i`, normalized by the ideal ordering |
//! | mAP    | mean over queries of average precision |

use std::fmt::Write as _;

use crate::config::GallerySplit;
use crate::data::{Dataset, Modality, Split};
use crate::error::{DcaError, Result};
use crate::networks::DcaModel;
use crate::par::{self, Execution};
use crate::tensor::{l2_distance, Tensor};

/// Default E-measure cutoff.
pub const E_MEASURE_CUTOFF: usize = 32;

/// Number of recall levels in the interpolated precision-recall curve.
pub const PR_LEVELS: usize = 101;

/// `n_q × n_g` Euclidean distances.
pub fn pairwise_distances(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let work = queries.len().saturating_mul(gallery.shape().first().copied().unwrap_or(0));
    pairwise_distances_with(Execution::for_work(work), queries, gallery)
}

pub fn pairwise_distances_with(exec: Execution, queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.shape().len() != 2 || gallery.shape().len() != 2 || queries.cols() != gallery.cols() {
        return Err(DcaError::shape("pairwise_distances", queries.shape(), gallery.shape()));
    }
    let (nq, ng) = (queries.rows(), gallery.rows());
    let mut out = vec![0.0; nq * ng];
    par::for_each_row(exec, &mut out, ng, |q, row| {
        for (g, d) in row.iter_mut().enumerate() {
            *d = l2_distance(queries.row(q), gallery.row(g));
        }
    });
    Tensor::new(vec![nq, ng], out)
}

/// Gallery ordered by ascending distance for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRanking {
    pub query_label: usize,
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    /// Distances along `order`.
    pub distances: Vec<f64>,
    /// `relevant[i]` iff `order[i]` shares the query's class.
    pub relevant: Vec<bool>,
    /// Gallery members of the query's class (`R`).
    pub class_size: usize,
}

impl RetrievalRanking {
    /// Ranking built directly from relevance flags, for tests and tools
    /// that already hold an ordering.
    pub fn from_relevance(relevant: Vec<bool>, class_size: usize) -> Self {
        let n = relevant.len();
        RetrievalRanking {
            query_label: 0,
            order: (0..n).collect(),
            distances: (0..n).map(|i| i as f64).collect(),
            relevant,
            class_size,
        }
    }

    fn relevant_in_top(&self, n: usize) -> usize {
        self.relevant.iter().take(n).filter(|&&r| r).count()
    }
}

/// Stable ascending sort of one distance row; ties keep gallery order.
pub fn rank_gallery(distances: &[f64], gallery_labels: &[usize], query_label: usize) -> RetrievalRanking {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    RetrievalRanking {
        query_label,
        distances: order.iter().map(|&i| distances[i]).collect(),
        relevant: order.iter().map(|&i| gallery_labels[i] == query_label).collect(),
        class_size: gallery_labels.iter().filter(|&&l| l == query_label).count(),
        order,
    }
}

/// Rankings for every query row against the gallery.
pub fn rank_all(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
) -> Result<Vec<RetrievalRanking>> {
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(DcaError::Contract("label count differs from row count".into()));
    }
    let dist = pairwise_distances(queries, gallery)?;
    let exec = Execution::for_work(queries.rows() * gallery.rows() * 8);
    Ok(par::map_range(exec, queries.rows(), |q| {
        rank_gallery(dist.row(q), gallery_labels, query_labels[q])
    }))
}

pub fn metric_nn(r: &RetrievalRanking) -> f64 {
    match r.relevant.first() {
        Some(true) => 1.0,
        _ => 0.0,
    }
}

pub fn metric_ft(r: &RetrievalRanking) -> f64 {
    if r.class_size == 0 {
        return 0.0;
    }
    r.relevant_in_top(r.class_size) as f64 / r.class_size as f64
}

pub fn metric_st(r: &RetrievalRanking) -> f64 {
    if r.class_size == 0 {
        return 0.0;
    }
    (r.relevant_in_top(2 * r.class_size) as f64 / r.class_size as f64).min(1.0)
}

/// E-measure at `cutoff` (clipped to the gallery size).
pub fn metric_e(r: &RetrievalRanking, cutoff: usize) -> f64 {
    let n = cutoff.min(r.relevant.len());
    if n == 0 || r.class_size == 0 {
        return 0.0;
    }
    let hits = r.relevant_in_top(n) as f64;
    let precision = hits / n as f64;
    let recall = hits / r.class_size as f64;
    if precision == 0.0 || recall == 0.0 {
        return 0.0;
    }
    2.0 / (1.0 / precision + 1.0 / recall)
}

pub fn metric_dcg(r: &RetrievalRanking) -> f64 {
    if r.class_size == 0 {
        return 0.0;
    }
    let discount = |rank: usize| if rank == 1 { 1.0 } else { 1.0 / (rank as f64).log2() };
    let dcg: f64 = r
        .relevant
        .iter()
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=r.class_size).map(discount).sum();
    dcg / ideal
}

/// Average precision: mean of precision@k over relevant ranks, divided by
/// the class size.
pub fn average_precision(r: &RetrievalRanking) -> f64 {
    if r.class_size == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &rel) in r.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / r.class_size as f64
}

pub fn metric_map(rankings: &[RetrievalRanking]) -> f64 {
    let scored: Vec<f64> = rankings
        .iter()
        .filter(|r| r.class_size > 0)
        .map(average_precision)
        .collect();
    mean(&scored)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The six retrieval metrics averaged over scored queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
    pub e: f64,
    pub dcg: f64,
    pub map: f64,
    pub queries: usize,
    /// Queries whose class has no gallery member; excluded from every
    /// average.
    pub skipped: usize,
}

impl MetricSummary {
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("NN", self.nn),
            ("FT", self.ft),
            ("ST", self.st),
            ("E", self.e),
            ("DCG", self.dcg),
            ("mAP", self.map),
        ]
    }

    /// `metric,value` CSV with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.rows() {
            let _ = writeln!(out, "{name},{v:.6}");
        }
        out
    }
}

pub fn summarize(rankings: &[RetrievalRanking], e_cutoff: usize) -> MetricSummary {
    let scored: Vec<&RetrievalRanking> = rankings.iter().filter(|r| r.class_size > 0).collect();
    let exec = Execution::for_work(scored.len() * scored.first().map_or(0, |r| r.relevant.len()));
    let per_query = par::map_range(exec, scored.len(), |i| {
        let r = scored[i];
        [
            metric_nn(r),
            metric_ft(r),
            metric_st(r),
            metric_e(r, e_cutoff),
            metric_dcg(r),
            average_precision(r),
        ]
    });
    let col = |k: usize| mean(&per_query.iter().map(|m| m[k]).collect::<Vec<_>>());
    MetricSummary {
        nn: col(0),
        ft: col(1),
        st: col(2),
        e: col(3),
        dcg: col(4),
        map: col(5),
        queries: scored.len(),
        skipped: rankings.len() - scored.len(),
    }
}

/// Which embedding stands in for a sketch query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryEmbedding {
    /// `Z¹` straight from the sketch encoder.
    Encoder,
    /// `Zᵗ = f_trans(Z¹)`.
    Transformed,
}

/// Rankings plus their summary for one model on one dataset.
#[derive(Debug, Clone)]
pub struct RetrievalEval {
    pub summary: MetricSummary,
    pub rankings: Vec<RetrievalRanking>,
}

/// Test-split sketches query the shape gallery selected by `gallery`.
pub fn evaluate_model(
    model: &DcaModel,
    dataset: &Dataset,
    gallery: GallerySplit,
    query: QueryEmbedding,
    e_cutoff: usize,
) -> Result<RetrievalEval> {
    let q_idx = dataset.indices(Modality::Sketch, Some(Split::Test));
    let g_split = match gallery {
        GallerySplit::All => None,
        GallerySplit::Train => Some(Split::Train),
        GallerySplit::Test => Some(Split::Test),
    };
    let g_idx = dataset.indices(Modality::Shape, g_split);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(DcaError::Config(format!(
            "evaluation needs test sketches and gallery shapes, found {} and {}",
            q_idx.len(),
            g_idx.len()
        )));
    }
    let mut queries = model.forward_sketch(&dataset.sketch_matrix(&q_idx)?)?;
    if query == QueryEmbedding::Transformed {
        queries = model.transform(&queries)?;
    }
    let views: Vec<&Tensor> = g_idx.iter().map(|&i| &dataset.samples[i].features).collect();
    let shapes = model.forward_shape(&views)?;
    let rankings = rank_all(&queries, &dataset.labels(&q_idx), &shapes, &dataset.labels(&g_idx))?;
    Ok(RetrievalEval {
        summary: summarize(&rankings, e_cutoff),
        rankings,
    })
}

/// `(recall, precision)` after every rank of one query.
pub fn raw_pr_points(r: &RetrievalRanking) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    r.relevant
        .iter()
        .enumerate()
        .map(|(i, &rel)| {
            hits += rel as usize;
            (hits as f64 / r.class_size as f64, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Interpolated precision at the 101 recall levels `0.00, 0.01, …, 1.00`,
/// averaged over queries with a nonempty class. The interpolated
/// precision at level `ℓ` is the maximum precision at any rank whose recall
/// is at least `ℓ`.
pub fn pr_curve(rankings: &[RetrievalRanking]) -> Vec<(f64, f64)> {
    let levels: Vec<f64> = (0..PR_LEVELS).map(|i| i as f64 / (PR_LEVELS - 1) as f64).collect();
    let scored: Vec<&RetrievalRanking> = rankings.iter().filter(|r| r.class_size > 0).collect();
    let exec = Execution::for_work(scored.len() * PR_LEVELS * 8);
    let per_query = par::map_range(exec, scored.len(), |i| {
        let points = raw_pr_points(scored[i]);
        let n = points.len();
        let mut suffix_max = vec![0.0f64; n + 1];
        for k in (0..n).rev() {
            suffix_max[k] = suffix_max[k + 1].max(points[k].1);
        }
        // recall is nondecreasing in rank, so the ranks reaching a level
        // form a suffix
        let mut first = 0;
        levels
            .iter()
            .map(|&lvl| {
                while first < n && points[first].0 < lvl {
                    first += 1;
                }
                suffix_max[first]
            })
            .collect::<Vec<f64>>()
    });
    levels
        .iter()
        .enumerate()
        .map(|(k, &lvl)| (lvl, mean(&per_query.iter().map(|p| p[k]).collect::<Vec<_>>())))
        .collect()
}

pub fn pr_curve_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in curve {
        let _ = writeln!(out, "{r:.2},{p:.6}");
    }
    out
}

/// Minimal SVG line plot of a precision-recall curve.
pub fn pr_curve_svg(curve: &[(f64, f64)], title: &str) -> String {
    let (w, h, m) = (480.0, 400.0, 48.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut path = String::new();
    for (i, (r, p)) in curve.iter().enumerate() {
        let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, x(*r), y(*p));
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    let _ = writeln!(
        svg,
        "<path d=\"M{m},{m} L{m},{} L{},{}\" stroke=\"black\" fill=\"none\"/>",
        h - m,
        w - m,
        h - m
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.1}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.1}</text>",
            x(v),
            h - m + 14.0,
            m - 6.0,
            y(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">recall</text>\n\
         <text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">precision</text>",
        w / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(svg, "<path d=\"{}\" stroke=\"#1f77b4\" stroke-width=\"2\" fill=\"none\"/>", path.trim_end());
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rk(flags: &[u8], class_size: usize) -> RetrievalRanking {
        RetrievalRanking::from_relevance(flags.iter().map(|&f| f == 1).collect(), class_size)
    }

    #[test]
    fn distances_hand_values() {
        let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_distances(&q, &g).unwrap().data(), &[5.0]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let d = pairwise_distances(&x, &x).unwrap();
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
        }
        assert!(d.data().iter().all(|&v| v >= 0.0));
        assert!(pairwise_distances(&q, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = rank_gallery(&[0.3, 0.1, 0.2], &[0, 1, 0], 0);
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.relevant, vec![false, true, true]);
        assert_eq!(r.class_size, 2);
        let tied = rank_gallery(&[0.5; 4], &[0, 0, 0, 0], 0);
        assert_eq!(tied.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn nn_cases() {
        assert_eq!(metric_nn(&rk(&[1, 0], 1)), 1.0);
        assert_eq!(metric_nn(&rk(&[0, 0], 0)), 0.0);
    }

    #[test]
    fn tiers() {
        let r = rk(&[1, 0, 1, 0, 0, 0], 2);
        assert_eq!(metric_ft(&r), 0.5);
        assert_eq!(metric_st(&r), 1.0);
        let perfect = rk(&[1, 1, 1, 0, 0], 3);
        assert_eq!((metric_ft(&perfect), metric_st(&perfect)), (1.0, 1.0));
        // 2R = 6 exceeds the gallery of 4
        let small = rk(&[0, 0, 1, 1], 3);
        assert_eq!(metric_st(&small), 2.0 / 3.0);
    }

    #[test]
    fn e_measure() {
        let mut perfect = vec![1u8; 32];
        perfect.extend([0; 10]);
        assert_eq!(metric_e(&rk(&perfect, 32), 32), 1.0);
        assert_eq!(metric_e(&rk(&[0; 40], 5), 32), 0.0);
        // P = 16/32 = 0.5, R = 16/64 = 0.25
        let mut half = vec![1u8; 16];
        half.extend([0; 16]);
        half.extend([1; 48]);
        let e = metric_e(&rk(&half, 64), 32);
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dcg_values() {
        assert_eq!(metric_dcg(&rk(&[1, 1, 0, 0], 2)), 1.0);
        let v = metric_dcg(&rk(&[1, 0, 1], 2));
        assert!((v - (1.0 + 1.0 / 3f64.log2()) / 2.0).abs() < 1e-15);
        assert!((v - 0.815_464_876_785_729).abs() < 1e-12);
        assert_eq!(metric_dcg(&rk(&[1, 0, 0, 0, 0], 1)), 1.0);
    }

    #[test]
    fn average_precision_values() {
        assert_eq!(metric_map(&[rk(&[1, 1, 0], 2), rk(&[1, 0], 1)]), 1.0);
        assert!((average_precision(&rk(&[1, 0, 1], 2)) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&rk(&[0, 1], 1)), 0.5);
    }

    #[test]
    fn summary_skips_empty_classes() {
        let s = summarize(&[rk(&[1, 0], 1), rk(&[0, 0], 0)], 32);
        assert_eq!((s.queries, s.skipped), (1, 1));
        assert_eq!(s.map, 1.0);
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("mAP,1.000000"));
    }

    #[test]
    fn pr_curve_hand_interpolation() {
        let curve = pr_curve(&[rk(&[1, 0, 1], 2)]);
        assert_eq!(curve.len(), 101);
        for &(recall, precision) in &curve {
            let expected = if recall <= 0.5 { 1.0 } else { 2.0 / 3.0 };
            assert_eq!(precision, expected, "recall {recall}");
        }
        let perfect = pr_curve(&[rk(&[1, 1, 0, 0], 2), rk(&[1, 0], 1)]);
        assert!(perfect.iter().all(|&(_, p)| p == 1.0));
    }

    #[test]
    fn pr_csv_and_svg() {
        let curve = pr_curve(&[rk(&[0, 1, 1, 0], 2)]);
        let csv = pr_curve_csv(&curve);
        assert_eq!(csv.lines().count(), 102);
        assert!(csv.starts_with("recall,precision\n0.00,"));
        let svg = pr_curve_svg(&curve, "test <curve>");
        assert!(svg.starts_with("<svg") && svg.contains("&lt;curve>"));
    }
}
