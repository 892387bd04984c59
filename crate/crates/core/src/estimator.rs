//! CPI estimation from representatives, behavioral fingerprints, and
//! retrieval metrics.

use crate::phases::{kmeans_fit, pick_representatives, ClusterModel, FeatureKind, KMeansConfig, PhasesError, Representative};
use crate::tensor::{cosine, Matrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("cluster {0} has weight but no simulated representative")]
    MissingRepresentativeCpi(usize),
    #[error("query {0}: true match not in pool")]
    MatchNotInPool(usize),
    #[error("no true CPI for {program} interval {interval}")]
    MissingTruth { program: String, interval: usize },
    #[error(transparent)]
    Phases(#[from] PhasesError),
}

/// One clustered interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub program_id: String,
    pub interval_index: usize,
    pub instrs: u64,
    pub cpi_true: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub program_id: String,
    pub weights: Vec<f64>,
}

/// Instruction-weighted cluster histogram of `(cluster, instrs)` pairs.
pub fn fingerprint(program_id: &str, assigned: &[(usize, u64)], k: usize) -> Fingerprint {
    let mut w = vec![0.0; k];
    let total: u64 = assigned.iter().map(|a| a.1).sum();
    for &(c, n) in assigned {
        w[c] += n as f64;
    }
    if total > 0 {
        w.iter_mut().for_each(|x| *x /= total as f64);
    }
    Fingerprint { program_id: program_id.to_string(), weights: w }
}

/// `Σ_c fp[c]·cpi[c]`.
pub fn estimate_cpi(fp: &Fingerprint, rep_cpis: &[Option<f64>]) -> Result<f64, EstimatorError> {
    let mut s = 0.0;
    for (c, &w) in fp.weights.iter().enumerate() {
        match rep_cpis.get(c).copied().flatten() {
            Some(cpi) => s += w * cpi,
            None => return Err(EstimatorError::MissingRepresentativeCpi(c)),
        }
    }
    Ok(s)
}

/// `max(0, 1 − |pred − truth| / truth)`.
pub fn accuracy(pred: f64, truth: f64) -> f64 {
    (1.0 - (pred - truth).abs() / truth).max(0.0)
}

pub fn speedup(total_instr: f64, simulated_instr: f64) -> f64 {
    total_instr / simulated_instr
}

/// Instruction-weighted mean CPI.
pub fn weighted_cpi(parts: &[(f64, u64)]) -> f64 {
    let total: u64 = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|&(c, n)| c * n as f64).sum::<f64>() / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramEstimate {
    pub program_id: String,
    pub estimated_cpi: f64,
    pub true_cpi: f64,
    pub accuracy: f64,
    pub intervals: usize,
    pub instrs: u64,
    pub fingerprint: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub mode: String,
    pub feature_kind: FeatureKind,
    pub k: usize,
    pub programs: Vec<ProgramEstimate>,
    pub mean_accuracy: f64,
    pub total_instr: u64,
    pub simulated_instr: u64,
    pub speedup: f64,
    pub representatives: Vec<Representative>,
}

impl EstimationReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>10} {:>10} {:>9}\n", "program", "est_cpi", "true_cpi", "accuracy");
        for p in &self.programs {
            s += &format!("{:<20} {:>10.4} {:>10.4} {:>8.2}%\n", p.program_id, p.estimated_cpi, p.true_cpi, 100.0 * p.accuracy);
        }
        s += &format!(
            "mode {} ({:?}), k {}: mean accuracy {:.2}%, {} of {} instructions simulated, speedup {:.1}x\n",
            self.mode,
            self.feature_kind,
            self.k,
            100.0 * self.mean_accuracy,
            self.simulated_instr,
            self.total_instr,
            self.speedup
        );
        s
    }
}

fn truth(r: &IntervalRecord) -> Result<f64, EstimatorError> {
    r.cpi_true.ok_or_else(|| EstimatorError::MissingTruth { program: r.program_id.clone(), interval: r.interval_index })
}

/// Per-program estimates for rows already assigned to clusters, where
/// `rep_cpi[c]` is the simulated CPI of cluster `c`'s representative.
fn estimate_programs(records: &[IntervalRecord], labels: &[usize], k: usize, rep_cpi: &[Option<f64>]) -> Result<Vec<ProgramEstimate>, EstimatorError> {
    let mut by_program: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_program.entry(&r.program_id).or_default().push(i);
    }
    by_program
        .into_iter()
        .map(|(pid, rows)| {
            let assigned: Vec<(usize, u64)> = rows.iter().map(|&i| (labels[i], records[i].instrs)).collect();
            let fp = fingerprint(pid, &assigned, k);
            let est = estimate_cpi(&fp, rep_cpi)?;
            let parts = rows.iter().map(|&i| Ok((truth(&records[i])?, records[i].instrs))).collect::<Result<Vec<_>, EstimatorError>>()?;
            let t = weighted_cpi(&parts);
            Ok(ProgramEstimate {
                program_id: pid.to_string(),
                estimated_cpi: est,
                true_cpi: t,
                accuracy: accuracy(est, t),
                intervals: rows.len(),
                instrs: assigned.iter().map(|a| a.1).sum(),
                fingerprint: fp.weights,
            })
        })
        .collect()
}

fn rep_cpis(model: &ClusterModel, reps: &[Representative], simulate: &impl Fn(&Representative) -> f64) -> Vec<Option<f64>> {
    let mut out = vec![None; model.k];
    for r in reps {
        out[r.cluster] = Some(simulate(r));
    }
    out
}

fn summarize(mode: &str, kind: FeatureKind, k: usize, programs: Vec<ProgramEstimate>, reps: Vec<Representative>, interval_len: u64) -> EstimationReport {
    let total: u64 = programs.iter().map(|p| p.instrs).sum();
    let simulated = reps.len() as u64 * interval_len;
    EstimationReport {
        mode: mode.into(),
        feature_kind: kind,
        k,
        mean_accuracy: programs.iter().map(|p| p.accuracy).sum::<f64>() / programs.len().max(1) as f64,
        total_instr: total,
        simulated_instr: simulated,
        speedup: speedup(total as f64, simulated as f64),
        programs,
        representatives: reps,
    }
}

fn keys(records: &[IntervalRecord]) -> Vec<(String, usize)> {
    records.iter().map(|r| (r.program_id.clone(), r.interval_index)).collect()
}

/// One global clustering over every program's intervals; only
/// representatives are passed to `simulate`.
pub fn cross_program_eval(
    points: &Matrix,
    records: &[IntervalRecord],
    kmeans: &KMeansConfig,
    kind: FeatureKind,
    interval_len: u64,
    simulate: impl Fn(&Representative) -> f64,
) -> Result<EstimationReport, EstimatorError> {
    let model = kmeans_fit(points, kmeans, kind)?;
    let labels: Vec<usize> = model.assign_all(points)?.iter().map(|a| a.0).collect();
    let reps = pick_representatives(&model, points, &keys(records))?;
    let cpis = rep_cpis(&model, &reps, &simulate);
    let programs = estimate_programs(records, &labels, model.k, &cpis)?;
    Ok(summarize("cross", kind, kmeans.k, programs, reps, interval_len))
}

/// Clusters each program on its own; `k` is capped at the program's
/// interval count.
pub fn intra_program_eval(
    points: &Matrix,
    records: &[IntervalRecord],
    kmeans: &KMeansConfig,
    kind: FeatureKind,
    interval_len: u64,
    simulate: impl Fn(&Representative) -> f64 + Sync,
) -> Result<EstimationReport, EstimatorError> {
    let mut by_program: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_program.entry(&r.program_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_program.into_values().collect();
    let per = crate::par::try_map(&groups, |rows| {
        let sub = Matrix::from_vec(rows.len(), points.cols, rows.iter().flat_map(|&i| points.row(i).to_vec()).collect());
        let recs: Vec<IntervalRecord> = rows.iter().map(|&i| records[i].clone()).collect();
        let cfg = KMeansConfig { k: kmeans.k.min(rows.len()), ..kmeans.clone() };
        let model = kmeans_fit(&sub, &cfg, kind)?;
        let labels: Vec<usize> = model.assign_all(&sub)?.iter().map(|a| a.0).collect();
        let reps = pick_representatives(&model, &sub, &keys(&recs))?;
        let cpis = rep_cpis(&model, &reps, &simulate);
        let est = estimate_programs(&recs, &labels, model.k, &cpis)?;
        Ok::<_, EstimatorError>((est, reps))
    })?;
    let mut programs = Vec::new();
    let mut reps = Vec::new();
    for (p, r) in per {
        programs.extend(p);
        reps.extend(r);
    }
    Ok(summarize("intra", kind, kmeans.k, programs, reps, interval_len))
}

pub fn mrr(ranks: &[usize]) -> f64 {
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len().max(1) as f64
}

pub fn recall_at_1(ranks: &[usize]) -> f64 {
    ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcsdResult {
    pub queries: usize,
    pub pool_size: usize,
    pub mrr: f64,
    pub recall_at_1: f64,
    pub ranks: Vec<usize>,
}

/// 1-based rank of `pool[target]` by cosine to `query`; earlier pool
/// entries win ties.
pub fn rank_of(query: &[f64], pool: &[Vec<f64>], target: usize) -> usize {
    let s = cosine(query, &pool[target]);
    1 + pool.iter().enumerate().filter(|&(j, p)| j != target && { let c = cosine(query, p); c > s || (c == s && j < target) }).count()
}

/// Each query `i` is ranked against `pools[i]`, whose true match sits at
/// `matches[i]`.
pub fn bcsd_eval(queries: &[Vec<f64>], pools: &[Vec<Vec<f64>>], matches: &[usize]) -> Result<BcsdResult, EstimatorError> {
    for (i, (&m, p)) in matches.iter().zip(pools).enumerate() {
        if m >= p.len() {
            return Err(EstimatorError::MatchNotInPool(i));
        }
    }
    let ranks = crate::par::map_indexed(queries.len(), |i| rank_of(&queries[i], &pools[i], matches[i]));
    Ok(BcsdResult {
        queries: queries.len(),
        pool_size: pools.first().map_or(0, Vec::len),
        mrr: mrr(&ranks),
        recall_at_1: recall_at_1(&ranks),
        ranks,
    })
}

/// Expected MRR of a uniformly random ranking over `n` items: `H_n / n`.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fingerprint_examples() {
        assert_eq!(fingerprint("p", &[(3, 10), (3, 5)], 5).weights, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(fingerprint("p", &[(0, 7), (1, 7)], 3).weights, vec![0.5, 0.5, 0.0]);
        let fp = fingerprint("p", &[(0, 3), (1, 7), (2, 11), (1, 13)], 3);
        assert!((fp.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn estimate_examples() {
        let fp = |w: Vec<f64>| Fingerprint { program_id: "p".into(), weights: w };
        assert_eq!(estimate_cpi(&fp(vec![1.0, 0.0]), &[Some(2.0), Some(5.0)]), Ok(2.0));
        assert_eq!(estimate_cpi(&fp(vec![0.5, 0.5]), &[Some(1.0), Some(3.0)]), Ok(2.0));
        assert_eq!(estimate_cpi(&fp(vec![0.5, 0.5]), &[Some(1.0), None]), Err(EstimatorError::MissingRepresentativeCpi(1)));
    }

    #[test]
    fn accuracy_and_speedup_examples() {
        assert!((accuracy(1.1, 1.0) - 0.9).abs() < 1e-12);
        assert_eq!(accuracy(1.0, 1.0), 1.0);
        assert_eq!(accuracy(5.0, 1.0), 0.0);
        assert!((speedup(1e12, 14.0 * 1e7) - 7142.857142857143).abs() < 1e-6);
    }

    fn records(cpis: &[(&str, f64)]) -> Vec<IntervalRecord> {
        cpis.iter()
            .enumerate()
            .map(|(i, &(p, c))| IntervalRecord { program_id: p.into(), interval_index: i, instrs: 100, cpi_true: Some(c) })
            .collect()
    }

    #[test]
    fn telescoping_exactness_and_k_equal_n() {
        // Intervals within a cluster share a CPI, so the estimate is exact.
        let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.1], vec![5.0, 5.0], vec![5.0, 5.1]]);
        let recs = records(&[("a", 1.0), ("a", 1.0), ("a", 4.0), ("b", 4.0)]);
        let sim = |r: &Representative| recs[r.row].cpi_true.unwrap();
        let rep = cross_program_eval(&pts, &recs, &KMeansConfig::new(2, 0), FeatureKind::Semantic, 100, sim).unwrap();
        assert!(rep.programs.iter().all(|p| (p.estimated_cpi - p.true_cpi).abs() < 1e-12));
        assert_eq!(rep.simulated_instr, 200);
        assert_eq!(rep.total_instr, 400);
        assert_eq!(rep.speedup, 2.0);

        let recs = records(&[("a", 1.0), ("a", 2.0), ("a", 3.5), ("a", 9.0)]);
        let sim = |r: &Representative| recs[r.row].cpi_true.unwrap();
        let rep = intra_program_eval(&pts, &recs, &KMeansConfig::new(4, 0), FeatureKind::Semantic, 100, sim).unwrap();
        assert_eq!(rep.programs[0].accuracy, 1.0);
    }

    #[test]
    fn identical_programs_identical_estimates() {
        let pts = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let recs = records(&[("a", 1.0), ("a", 3.0), ("b", 1.0), ("b", 3.0)]);
        let sim = |r: &Representative| recs[r.row].cpi_true.unwrap();
        let rep = cross_program_eval(&pts, &recs, &KMeansConfig::new(2, 0), FeatureKind::Semantic, 100, sim).unwrap();
        assert_eq!(rep.programs[0].fingerprint, rep.programs[1].fingerprint);
        assert_eq!(rep.programs[0].estimated_cpi, rep.programs[1].estimated_cpi);
    }

    #[test]
    fn single_phase_k1_matches_representative() {
        let pts = Matrix::from_rows(&[vec![0.0], vec![0.2], vec![0.1]]);
        let recs = records(&[("a", 2.0), ("a", 2.4), ("a", 2.2)]);
        let sim = |r: &Representative| recs[r.row].cpi_true.unwrap();
        let rep = intra_program_eval(&pts, &recs, &KMeansConfig::new(1, 0), FeatureKind::Traditional, 100, sim).unwrap();
        assert_eq!(rep.representatives[0].row, 2);
        assert!((rep.programs[0].estimated_cpi - 2.2).abs() < 1e-12);
        assert!((rep.programs[0].accuracy - accuracy(2.2, 2.2)).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics() {
        assert_eq!((mrr(&[1, 1, 1]), recall_at_1(&[1, 1, 1])), (1.0, 1.0));
        assert_eq!((mrr(&[2]), recall_at_1(&[2])), (0.5, 0.0));
        assert!((random_mrr(100) - 0.05187377517639621).abs() < 1e-12);
    }

    #[test]
    fn bcsd_matches_brute_force_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let queries: Vec<Vec<f64>> = (0..10).map(|_| v(&mut rng)).collect();
        let mut pools: Vec<Vec<Vec<f64>>> = (0..10).map(|_| (0..20).map(|_| v(&mut rng)).collect()).collect();
        // A duplicated vector exercises the tie rule.
        pools[0][5] = pools[0][3].clone();
        let matches: Vec<usize> = (0..10).map(|i| if i == 0 { 5 } else { rng.gen_range(0..20) }).collect();
        let r = bcsd_eval(&queries, &pools, &matches).unwrap();
        for i in 0..10 {
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|&a, &b| cosine(&queries[i], &pools[i][b]).total_cmp(&cosine(&queries[i], &pools[i][a])));
            let pos = order.iter().position(|&j| j == matches[i]).unwrap() + 1;
            assert_eq!(r.ranks[i], pos, "query {i}");
        }
        assert!(r.recall_at_1 <= r.mrr && r.mrr <= 1.0 && r.mrr >= 1.0 / 20.0);
        assert_eq!(bcsd_eval(&queries[..1], &pools[..1], &[20]), Err(EstimatorError::MatchNotInPool(0)));
    }
}
