//! From accepted linkages to text polygons, and polygon-IoU scoring.

use std::collections::{BTreeMap, VecDeque};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, Point};
use crate::geometry_labels::TextAnnotation;
use crate::proposal_graph::Proposal;

/// A detected text region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub ordered_nodes: Vec<Proposal>,
    pub polygon: Vec<Point>,
    pub score: f64,
}

/// Undirected links accepted from directed pivot→neighbor probabilities.
///
/// A pair is accepted when every direction in which it was evaluated
/// reached `thresh`.
pub fn accept_links(evaluated: &[(usize, usize, f64)], thresh: f64) -> Vec<(usize, usize)> {
    let mut verdict: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    for &(u, v, p) in evaluated {
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        let ok = p >= thresh;
        verdict.entry(key).and_modify(|acc| *acc &= ok).or_insert(ok);
    }
    verdict.into_iter().filter(|&(_, ok)| ok).map(|(k, _)| k).collect()
}

/// Connected components of the link graph by breadth-first search. Each
/// component is sorted, and components are ordered by smallest member.
pub fn group_bfs(n: usize, links: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in links {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        queue.push_back(s);
        let mut comp = Vec::new();
        while let Some(u) = queue.pop_front() {
            comp.push(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Length of the open path through `points` in `order`, independent of the
/// direction of travel.
pub fn path_length(points: &[Point], order: &[usize]) -> f64 {
    let fwd = order.windows(2).fold(0.0, |acc, w| acc + points[w[0]].dist(points[w[1]]));
    let bwd = order.windows(2).rev().fold(0.0, |acc, w| acc + points[w[1]].dist(points[w[0]]));
    fwd.min(bwd)
}

const EXACT_LIMIT: usize = 10;

/// Order minimizing total consecutive center distance (open path).
///
/// Small sets are solved exactly by dynamic programming over subsets;
/// larger ones use nearest-neighbor construction refined by 2-opt. The
/// result is canonicalized to start at the end with the smaller x (then y),
/// and does not depend on the order of `points`.
pub fn order_min_path(points: &[Point]) -> Vec<usize> {
    let n = points.len();
    if n <= 1 {
        return (0..n).collect();
    }
    let mut canon: Vec<usize> = (0..n).collect();
    canon.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
            .then(a.cmp(&b))
    });
    let pts: Vec<Point> = canon.iter().map(|&i| points[i]).collect();
    let local = if n <= EXACT_LIMIT {
        held_karp(&pts)
    } else {
        two_opt(&pts, nearest_neighbor(&pts))
    };
    let mut order: Vec<usize> = local.into_iter().map(|i| canon[i]).collect();
    let (a, b) = (points[order[0]], points[order[n - 1]]);
    if b.x < a.x || (b.x == a.x && b.y < a.y) {
        order.reverse();
    }
    order
}

fn held_karp(pts: &[Point]) -> Vec<usize> {
    let n = pts.len();
    let full = 1usize << n;
    let mut cost = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    for j in 0..n {
        cost[(1 << j) * n + j] = 0.0;
    }
    for set in 1..full {
        for j in 0..n {
            let c = cost[set * n + j];
            if set & (1 << j) == 0 || !c.is_finite() {
                continue;
            }
            for k in 0..n {
                if set & (1 << k) != 0 {
                    continue;
                }
                let next = set | (1 << k);
                let v = c + pts[j].dist(pts[k]);
                if v < cost[next * n + k] {
                    cost[next * n + k] = v;
                    parent[next * n + k] = j;
                }
            }
        }
    }
    let last_set = full - 1;
    let mut end = 0;
    for j in 1..n {
        if cost[last_set * n + j] < cost[last_set * n + end] {
            end = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let (mut set, mut j) = (last_set, end);
    loop {
        order.push(j);
        let p = parent[set * n + j];
        if p == usize::MAX {
            break;
        }
        set &= !(1 << j);
        j = p;
    }
    order.reverse();
    order
}

fn nearest_neighbor(pts: &[Point]) -> Vec<usize> {
    let n = pts.len();
    let mut used = vec![false; n];
    let mut order = vec![0];
    used[0] = true;
    for _ in 1..n {
        let cur = pts[*order.last().expect("non-empty")];
        let next = (0..n)
            .filter(|&i| !used[i])
            .min_by(|&a, &b| cur.dist(pts[a]).total_cmp(&cur.dist(pts[b])))
            .expect("unused node");
        used[next] = true;
        order.push(next);
    }
    order
}

fn two_opt(pts: &[Point], mut order: Vec<usize>) -> Vec<usize> {
    let n = order.len();
    let d = |a: usize, b: usize| pts[a].dist(pts[b]);
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                // reverse order[i..=j]; open path so the outer edges may be absent
                let before = if i > 0 { d(order[i - 1], order[i]) } else { 0.0 } +
                    if j + 1 < n { d(order[j], order[j + 1]) } else { 0.0 };
                let after = if i > 0 { d(order[i - 1], order[j]) } else { 0.0 } +
                    if j + 1 < n { d(order[i], order[j + 1]) } else { 0.0 };
                if after + 1e-12 < before {
                    order[i..=j].reverse();
                    improved = true;
                }
            }
        }
    }
    order
}

/// Boundary through the top and bottom midpoints of ordered nodes: top
/// points in order, then bottom points reversed. A single node yields its
/// four corners.
pub fn reconstruct_boundary(ordered: &[Proposal]) -> Vec<Point> {
    reconstruct_boundary_extended(ordered, 0.0)
}

/// As [`reconstruct_boundary`], with each end pushed outward by half the
/// end node's width plus `end_trim` times its height. This restores the
/// extent removed when center regions were cut back from the ends.
///
/// Nodes are traversed so that the top edge runs along the writing
/// direction. Self-intersecting results are replaced by their convex hull.
pub fn reconstruct_boundary_extended(ordered: &[Proposal], end_trim: f64) -> Vec<Point> {
    let Some(first) = ordered.first() else {
        return Vec::new();
    };
    if ordered.len() == 1 {
        let ext = first.width / 2.0 + end_trim * first.height();
        let grown = Proposal {
            width: if end_trim > 0.0 { 2.0 * ext } else { first.width },
            ..*first
        };
        return grown.corners().to_vec();
    }
    let mut nodes = ordered.to_vec();
    let mean_dir = nodes.iter().fold(Point::default(), |acc, p| acc + p.direction());
    let span = nodes[nodes.len() - 1].center - nodes[0].center;
    if span.dot(mean_dir) < 0.0 {
        nodes.reverse();
    }
    let mut top: Vec<Point> = nodes.iter().map(Proposal::top_mid).collect();
    let mut bottom: Vec<Point> = nodes.iter().map(Proposal::bottom_mid).collect();
    if end_trim > 0.0 {
        let k = nodes.len() - 1;
        let out0 = unit(nodes[0].center - nodes[1].center);
        let out1 = unit(nodes[k].center - nodes[k - 1].center);
        let e0 = nodes[0].width / 2.0 + end_trim * nodes[0].height();
        let e1 = nodes[k].width / 2.0 + end_trim * nodes[k].height();
        top[0] = top[0] + out0 * e0;
        bottom[0] = bottom[0] + out0 * e0;
        top[k] = top[k] + out1 * e1;
        bottom[k] = bottom[k] + out1 * e1;
    }
    let poly: Vec<Point> = top.into_iter().chain(bottom.into_iter().rev()).collect();
    if geometry::is_simple(&poly) {
        poly
    } else {
        warn!("self-intersecting boundary with {} nodes, using convex hull", nodes.len());
        geometry::convex_hull(&poly)
    }
}

fn unit(p: Point) -> Point {
    let n = p.norm();
    if n > 0.0 {
        p * (1.0 / n)
    } else {
        Point::new(1.0, 0.0)
    }
}

/// Detection quality at a polygon-IoU threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub hmean: f64,
    /// `(prediction, ground truth, IoU)` for every match.
    pub matches: Vec<(usize, usize, f64)>,
    pub num_preds: usize,
    pub num_gts: usize,
}

impl EvalReport {
    pub fn from_counts(matched: usize, num_preds: usize, num_gts: usize) -> Self {
        let precision = if num_preds == 0 { 0.0 } else { matched as f64 / num_preds as f64 };
        let recall = if num_gts == 0 { 0.0 } else { matched as f64 / num_gts as f64 };
        let hmean = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            recall,
            precision,
            hmean,
            matches: Vec::new(),
            num_preds,
            num_gts,
        }
    }

    /// Pools several per-image reports by summing their counts.
    pub fn pooled(reports: &[EvalReport]) -> Self {
        let matched = reports.iter().map(|r| r.matches.len()).sum();
        let preds = reports.iter().map(|r| r.num_preds).sum();
        let gts = reports.iter().map(|r| r.num_gts).sum();
        Self::from_counts(matched, preds, gts)
    }
}

/// Greedy one-to-one matching by descending IoU.
pub fn evaluate_polygons(preds: &[Vec<Point>], gts: &[Vec<Point>], iou_thresh: f64) -> EvalReport {
    let mut pairs = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = geometry::polygon_iou(p, g);
            if iou >= iou_thresh {
                pairs.push((i, j, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut used_p, mut used_g) = (vec![false; preds.len()], vec![false; gts.len()]);
    let mut matches = Vec::new();
    for (i, j, iou) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matches.push((i, j, iou));
        }
    }
    let mut report = EvalReport::from_counts(matches.len(), preds.len(), gts.len());
    report.matches = matches;
    report
}

pub fn evaluate(preds: &[TextInstance], gts: &[TextAnnotation], iou_thresh: f64) -> EvalReport {
    let p: Vec<Vec<Point>> = preds.iter().map(|t| t.polygon.clone()).collect();
    let g: Vec<Vec<Point>> = gts.iter().map(|t| t.polygon.clone()).collect();
    evaluate_polygons(&p, &g, iou_thresh)
}
