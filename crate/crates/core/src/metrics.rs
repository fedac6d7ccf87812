//! Wayfinding metrics over the navigation graph.

use std::collections::HashMap;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};

use crate::data::{euclidean, NavGraph};
use crate::error::{Error, Result};

pub const DEFAULT_SUCCESS_THRESHOLD_M: f64 = 3.0;
/// Graphs up to this many panos get an all-pairs distance table.
pub const ALL_PAIRS_LIMIT: usize = 4096;

/// Shortest-path distances over the navigation graph, with edges weighted by
/// the Euclidean distance between pano positions.
#[derive(Debug, Clone)]
pub struct Geodesics {
    index: HashMap<String, NodeIndex>,
    graph: UnGraph<(), f64>,
    table: Option<Vec<Vec<f64>>>,
}

impl Geodesics {
    pub fn new(nav: &NavGraph) -> Result<Self> {
        nav.validate()?;
        let mut graph = UnGraph::<(), f64>::with_capacity(nav.panos.len(), nav.edges.len());
        let mut index = HashMap::with_capacity(nav.panos.len());
        for id in nav.panos.keys() {
            index.insert(id.clone(), graph.add_node(()));
        }
        for (a, b) in &nav.edges {
            let w = euclidean(nav.panos[a], nav.panos[b]);
            graph.add_edge(index[a], index[b], w);
        }
        let mut geo = Geodesics {
            index,
            graph,
            table: None,
        };
        if geo.graph.node_count() <= ALL_PAIRS_LIMIT {
            geo.table = Some(geo.all_pairs());
        }
        Ok(geo)
    }

    fn distances_from(&self, source: NodeIndex) -> Vec<f64> {
        let reached = dijkstra(&self.graph, source, None, |e| *e.weight());
        let mut row = vec![f64::INFINITY; self.graph.node_count()];
        for (node, d) in reached {
            row[node.index()] = d;
        }
        row
    }

    #[cfg(feature = "parallel")]
    fn all_pairs(&self) -> Vec<Vec<f64>> {
        use rayon::prelude::*;
        self.graph
            .node_indices()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|s| self.distances_from(s))
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn all_pairs(&self) -> Vec<Vec<f64>> {
        self.graph
            .node_indices()
            .map(|s| self.distances_from(s))
            .collect()
    }

    fn node(&self, pano: &str) -> Result<NodeIndex> {
        self.index
            .get(pano)
            .copied()
            .ok_or_else(|| Error::UnknownPano(pano.to_owned()))
    }

    /// Shortest-path length in meters; infinite when disconnected.
    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        if ia == ib {
            return Ok(0.0);
        }
        Ok(match &self.table {
            Some(t) => t[ia.index()][ib.index()],
            None => self.distances_from(ia)[ib.index()],
        })
    }
}

/// One-off shortest-path query.
pub fn geodesic(graph: &NavGraph, a: &str, b: &str) -> Result<f64> {
    Geodesics::new(graph)?.distance(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_id: Option<String>,
    pub reference_path: Vec<String>,
    pub agent_path: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ne_m: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Unconstrained DTW between two sequences under a pairwise cost.
pub fn dtw(a_len: usize, b_len: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
    let mut prev = vec![f64::INFINITY; b_len + 1];
    prev[0] = 0.0;
    let mut cur = vec![f64::INFINITY; b_len + 1];
    for i in 1..=a_len {
        cur[0] = f64::INFINITY;
        for j in 1..=b_len {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = cost(i - 1, j - 1) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b_len]
}

pub fn episode_metrics(ep: &Episode, geo: &Geodesics, threshold_m: f64) -> Result<EpisodeMetrics> {
    if !(threshold_m > 0.0 && threshold_m.is_finite()) {
        return Err(Error::Invariant(format!(
            "success threshold must be positive, got {threshold_m}"
        )));
    }
    let (reference, agent) = (&ep.reference_path, &ep.agent_path);
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference path"));
    }
    if agent.is_empty() {
        return Err(Error::EmptyInput("agent path"));
    }
    let ref_dist: Vec<Vec<f64>> = agent
        .iter()
        .map(|a| reference.iter().map(|r| geo.distance(a, r)).collect())
        .collect::<Result<_>>()?;

    let ne_m = ref_dist[agent.len() - 1][reference.len() - 1];
    let sr = if ne_m < threshold_m { 1.0 } else { 0.0 };
    let shortest = geo.distance(&agent[0], &reference[reference.len() - 1])?;
    let mut travelled = 0.0;
    for w in agent.windows(2) {
        travelled += geo.distance(&w[0], &w[1])?;
    }
    let denom = travelled.max(shortest);
    let spl = if sr == 0.0 {
        0.0
    } else if denom == 0.0 {
        1.0
    } else {
        shortest / denom
    };
    let cost = dtw(agent.len(), reference.len(), |i, j| ref_dist[i][j]);
    let ndtw = (-cost / (reference.len() as f64 * threshold_m)).exp();
    Ok(EpisodeMetrics {
        ne_m,
        sr,
        spl,
        ndtw,
        sdtw: sr * ndtw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub word_count: Option<f64>,
    pub ne_m: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Macro-averages over episodes; word count is the mean over `word_counts`
/// and absent when none are given.
pub fn corpus_report(metrics: &[EpisodeMetrics], word_counts: &[usize]) -> Result<MetricReport> {
    if metrics.is_empty() {
        return Err(Error::EmptyInput("episodes"));
    }
    let n = metrics.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        n: metrics.len(),
        word_count: (!word_counts.is_empty())
            .then(|| word_counts.iter().sum::<usize>() as f64 / word_counts.len() as f64),
        ne_m: mean(|m| m.ne_m),
        sr: mean(|m| m.sr),
        spl: mean(|m| m.spl),
        ndtw: mean(|m| m.ndtw),
        sdtw: mean(|m| m.sdtw),
    })
}

fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// The `report.json` form: table column names, rates ×100, one decimal.
/// Infinite NE (a disconnected episode) is written as null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "WC")]
    pub wc: Option<f64>,
    #[serde(rename = "NE")]
    pub ne: Option<f64>,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    #[serde(rename = "NDTW")]
    pub ndtw: f64,
    #[serde(rename = "SDTW")]
    pub sdtw: f64,
}

impl From<&MetricReport> for ReportTable {
    fn from(r: &MetricReport) -> Self {
        ReportTable {
            n: r.n,
            wc: r.word_count.map(one_decimal),
            ne: r.ne_m.is_finite().then(|| one_decimal(r.ne_m)),
            sr: one_decimal(100.0 * r.sr),
            spl: one_decimal(100.0 * r.spl),
            ndtw: one_decimal(100.0 * r.ndtw),
            sdtw: one_decimal(100.0 * r.sdtw),
        }
    }
}

/// Evaluates every episode against a shared distance table.
pub fn evaluate_episodes(
    episodes: &[Episode],
    graph: &NavGraph,
    threshold_m: f64,
) -> Result<Vec<EpisodeMetrics>> {
    let geo = Geodesics::new(graph)?;
    let run = |ep: &Episode| {
        episode_metrics(ep, &geo, threshold_m)
            .map_err(|e| e.in_stage("evaluate", ep.instruction_id.as_deref()))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        episodes.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        episodes.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn line(points: &[(&str, f64)]) -> NavGraph {
        let panos: BTreeMap<String, [f64; 3]> = points
            .iter()
            .map(|(k, x)| (k.to_string(), [*x, 0.0, 0.0]))
            .collect();
        let edges = points
            .windows(2)
            .map(|w| (w[0].0.to_string(), w[1].0.to_string()))
            .collect();
        NavGraph { panos, edges }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn ep(reference: &[&str], agent: &[&str]) -> Episode {
        Episode {
            instruction_id: None,
            reference_path: ids(reference),
            agent_path: ids(agent),
            word_count: None,
        }
    }

    #[test]
    fn geodesic_basics() {
        let mut g = line(&[("a", 0.0), ("b", 3.0), ("c", 7.0)]);
        assert_eq!(geodesic(&g, "a", "a").unwrap(), 0.0);
        assert_eq!(geodesic(&g, "a", "b").unwrap(), 3.0);
        assert_eq!(geodesic(&g, "a", "c").unwrap(), 7.0);
        assert!(matches!(
            geodesic(&g, "a", "zz"),
            Err(Error::UnknownPano(_))
        ));
        g.panos.insert("island".into(), [0.0, 9.0, 0.0]);
        assert!(geodesic(&g, "a", "island").unwrap().is_infinite());
    }

    #[test]
    fn perfect_episode() {
        let g = line(&[("a", 0.0), ("b", 3.0), ("c", 7.0)]);
        let geo = Geodesics::new(&g).unwrap();
        let m = episode_metrics(&ep(&["a", "b", "c"], &["a", "b", "c"]), &geo, 3.0).unwrap();
        assert_eq!(
            m,
            EpisodeMetrics {
                ne_m: 0.0,
                sr: 1.0,
                spl: 1.0,
                ndtw: 1.0,
                sdtw: 1.0
            }
        );
        let r = corpus_report(&[m], &[12]).unwrap();
        let t = ReportTable::from(&r);
        assert_eq!((t.sr, t.ndtw, t.wc), (100.0, 100.0, Some(12.0)));
    }

    #[test]
    fn stopping_short() {
        let g = line(&[("a", 0.0), ("b", 5.0), ("c", 10.0)]);
        let geo = Geodesics::new(&g).unwrap();
        let m = episode_metrics(&ep(&["a", "b", "c"], &["a", "b"]), &geo, 3.0).unwrap();
        assert_eq!((m.ne_m, m.sr, m.spl, m.sdtw), (5.0, 0.0, 0.0, 0.0));
        assert!(m.ndtw > 0.0 && m.ndtw < 1.0);
    }

    #[test]
    fn disconnected_episode() {
        let mut g = line(&[("a", 0.0), ("b", 5.0)]);
        g.panos.insert("z".into(), [50.0, 0.0, 0.0]);
        let geo = Geodesics::new(&g).unwrap();
        let m = episode_metrics(&ep(&["a", "b"], &["z"]), &geo, 3.0).unwrap();
        assert!(m.ne_m.is_infinite());
        assert_eq!((m.sr, m.ndtw), (0.0, 0.0));
        let t = ReportTable::from(&corpus_report(&[m], &[]).unwrap());
        assert_eq!(t.ne, None);
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"N":1,"WC":null,"NE":null,"SR":0.0,"SPL":0.0,"NDTW":0.0,"SDTW":0.0}"#
        );
    }

    #[test]
    fn success_rate_average() {
        let perfect = EpisodeMetrics {
            ne_m: 0.0,
            sr: 1.0,
            spl: 1.0,
            ndtw: 1.0,
            sdtw: 1.0,
        };
        let failed = EpisodeMetrics {
            ne_m: 4.0,
            sr: 0.0,
            spl: 0.0,
            ndtw: 0.5,
            sdtw: 0.0,
        };
        let t = ReportTable::from(&corpus_report(&[perfect, failed], &[]).unwrap());
        assert_eq!((t.sr, t.ndtw, t.ne), (50.0, 75.0, Some(2.0)));
        assert!(corpus_report(&[], &[]).is_err());
    }

    #[test]
    fn detour_spl() {
        let g = line(&[("a", 0.0), ("b", 3.0), ("c", 6.0)]);
        let geo = Geodesics::new(&g).unwrap();
        let m = episode_metrics(&ep(&["a", "b"], &["a", "b", "c", "b"]), &geo, 3.0).unwrap();
        assert_eq!(m.sr, 1.0);
        assert!((m.spl - 3.0 / 9.0).abs() < 1e-12);
        let stay = episode_metrics(&ep(&["a"], &["a"]), &geo, 3.0).unwrap();
        assert_eq!(stay.spl, 1.0);
    }

    #[test]
    fn dtw_small() {
        let a = [0.0f64, 1.0, 2.0];
        let b = [0.0, 2.0];
        let c = dtw(3, 2, |i, j| (a[i] - b[j]).abs());
        assert_eq!(c, 1.0);
        assert_eq!(dtw(0, 2, |_, _| 0.0), f64::INFINITY);
    }
}
