//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! AC4 to AC8 share one end-to-end run of the default configuration in a
//! temporary directory. Exits nonzero when any criterion fails.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbbv_core::aggregator::{Aggregator, AggregatorConfig, WeightedSet};
use sbbv_core::artifact::StageManifest;
use sbbv_core::asmnorm::{normalize, parse_instruction};
use sbbv_core::blockstore::{parse_trace, segment_trace, slice_intervals, traditional_bbv, BlockId, INSTR_BYTES};
use sbbv_core::config::RunConfig;
use sbbv_core::encoder::Encoder;
use sbbv_core::estimator::{bcsd_eval, cross_program_eval, IntervalRecord};
use sbbv_core::oracle::{random_spec, run_workload};
use sbbv_core::phases::{kmeans_fit, FeatureKind, KMeansConfig};
use sbbv_core::pipeline::{EstimateMode, Pipeline};
use sbbv_core::tensor::Matrix;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: &str, title: &str, started: Instant, o: Outcome) -> bool {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{id} {tag} {title}: {} [{:.1}s]", o.detail, started.elapsed().as_secs_f64());
    o.pass
}

fn random_set(size: usize, bbe: usize, rng: &mut ChaCha8Rng) -> WeightedSet {
    let raw: Vec<f64> = (0..size).map(|_| rng.gen_range(1.0..100.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut data = Vec::with_capacity(size * (bbe + 1));
    for r in &raw {
        let w = r / total;
        data.extend((0..bbe).map(|_| w * rng.gen_range(-1.0..1.0)));
        data.push(w);
    }
    WeightedSet { elements: Matrix::from_vec(size, bbe + 1, data), blocks: (0..size as u64).map(BlockId).collect() }
}

fn ac1() -> Outcome {
    let agg = Aggregator::new(AggregatorConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut sizes: Vec<usize> = (0..98).map(|_| rng.gen_range(1..=512)).collect();
    sizes.extend([1, 512]);
    let mut worst: f64 = 0.0;
    for &n in &sizes {
        let set = random_set(n, agg.config.bbe_size, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (a, ca) = agg.infer(&set).unwrap();
        let (b, cb) = agg.infer(&set.permuted(&perm)).unwrap();
        let scale = a.iter().fold(ca.abs(), |m, x| m.max(x.abs())).max(1e-12);
        let diff = a.iter().zip(&b).fold((ca - cb).abs(), |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    outcome(worst <= 1e-6, format!("max relative difference {worst:.2e} over {} sets of size 1..=512 (limit 1e-6)", sizes.len()))
}

fn ac2() -> Outcome {
    let e = Encoder::grad_check(5).unwrap();
    let a = Aggregator::grad_check(5).unwrap();
    let all: Vec<_> = e.tensors.iter().chain(&a.tensors).collect();
    let worst = all.iter().max_by(|x, y| x.rel_err.total_cmp(&y.rel_err)).unwrap();
    let pass = all.iter().all(|t| t.rel_err <= 1e-4);
    outcome(
        pass,
        format!(
            "{} encoder + {} aggregator tensors, max relative error {:.2e} at `{}` (limit 1e-4)",
            e.tensors.len(),
            a.tensors.len(),
            worst.rel_err,
            worst.name
        ),
    )
}

/// Exact comparison of `dot(q,a)/|a|` against `dot(q,b)/|b|` on integer vectors.
fn cos_cmp(q: &[i64], a: &[i64], b: &[i64]) -> std::cmp::Ordering {
    let dot = |x: &[i64], y: &[i64]| x.iter().zip(y).map(|(u, v)| (u * v) as i128).sum::<i128>();
    let (da, db) = (dot(q, a), dot(q, b));
    let (na, nb) = (dot(a, a), dot(b, b));
    // Compare sign(da)·da²·nb with sign(db)·db²·na.
    let lhs = da.signum() * da * da * nb;
    let rhs = db.signum() * db * db * na;
    lhs.cmp(&rhs)
}

fn ac3a() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut instances = 0;
    for _ in 0..20 {
        let vec8 = |rng: &mut ChaCha8Rng| -> Vec<i64> {
            loop {
                let v: Vec<i64> = (0..8).map(|_| rng.gen_range(-3..=3)).collect();
                if v.iter().any(|&x| x != 0) {
                    return v;
                }
            }
        };
        let queries: Vec<Vec<i64>> = (0..10).map(|_| vec8(&mut rng)).collect();
        let mut pools = Vec::new();
        let mut matches = Vec::new();
        for _ in 0..10 {
            let mut pool: Vec<Vec<i64>> = (0..20).map(|_| vec8(&mut rng)).collect();
            // Exact duplicates exercise the tie rule.
            let (a, b) = (rng.gen_range(0..20), rng.gen_range(0..20));
            pool[b] = pool[a].clone();
            matches.push(if rng.gen_bool(0.5) { a.max(b) } else { rng.gen_range(0..20) });
            pools.push(pool);
        }
        let expected: Vec<usize> = (0..10)
            .map(|i| {
                let mut order: Vec<usize> = (0..20).collect();
                order.sort_by(|&x, &y| cos_cmp(&queries[i], &pools[i][y], &pools[i][x]).then(x.cmp(&y)));
                order.iter().position(|&j| j == matches[i]).unwrap() + 1
            })
            .collect();
        let f = |v: &Vec<i64>| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let got = bcsd_eval(
            &queries.iter().map(f).collect::<Vec<_>>(),
            &pools.iter().map(|p| p.iter().map(f).collect()).collect::<Vec<_>>(),
            &matches,
        )
        .unwrap();
        if got.ranks != expected {
            return Err(format!("ranks {:?} != brute force {:?}", got.ranks, expected));
        }
        // MRR as an exact rational over lcm(1..=20).
        let lcm: u128 = 232_792_560;
        let num: u128 = expected.iter().map(|&r| lcm / r as u128).sum();
        let exact = num as f64 / (10 * lcm) as f64;
        let top = expected.iter().filter(|&&r| r == 1).count();
        if (got.mrr - exact).abs() > 4.0 * f64::EPSILON * exact || got.recall_at_1 != top as f64 / 10.0 {
            return Err(format!("MRR {} vs {exact}, recall {} vs {top}/10", got.mrr, got.recall_at_1));
        }
        instances += 1;
    }
    Ok(format!("{instances} instances of 10 queries x 20-pool"))
}

/// Recounts block instruction totals per interval straight from trace text,
/// keyed by the normalized block text.
fn recount(trace: &str, interval_len: usize) -> Vec<BTreeMap<String, u64>> {
    let mut blocks: Vec<Vec<String>> = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let mut prev_pc: Option<u64> = None;
    for (i, line) in trace.lines().enumerate() {
        let (pc, asm) = line.split_once('\t').unwrap();
        let pc = u64::from_str_radix(pc, 16).unwrap();
        if prev_pc.is_some_and(|p| p + INSTR_BYTES != pc) && !cur.is_empty() {
            blocks.push(std::mem::take(&mut cur));
        }
        prev_pc = Some(pc);
        let ins = parse_instruction(asm, i + 1).unwrap().unwrap();
        let mnemonic = asm.split_whitespace().next().unwrap();
        cur.push(normalize(&ins).text());
        if matches!(mnemonic, "jmp" | "je" | "jne" | "jl" | "jge" | "call" | "ret") {
            blocks.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    let mut out = vec![BTreeMap::new()];
    let mut filled = 0;
    for b in blocks {
        let key = b.join("\n");
        for _ in 0..b.len() {
            if filled == interval_len {
                out.push(BTreeMap::new());
                filled = 0;
            }
            *out.last_mut().unwrap().entry(key.clone()).or_insert(0) += 1;
            filled += 1;
        }
    }
    out
}

fn ac3b() -> Result<String, String> {
    let mut checked = 0;
    for (seed, len) in [(1u64, 97usize), (2, 512), (3, 1000)] {
        let spec = random_spec(&format!("p{seed}"), seed, 2, 4, 512, (2, 4));
        let run = run_workload(&spec, seed).unwrap();
        let text = run.trace_text();
        let seg = segment_trace(&parse_trace(&text).unwrap());
        let text_of: HashMap<BlockId, String> = seg.blocks.iter().map(|b| (b.id, b.text())).collect();
        let ivs = slice_intervals(&spec.name, &seg.execs, len).unwrap();
        let expected = recount(&text, len);
        if ivs.len() != expected.len() {
            return Err(format!("{} intervals vs recount {}", ivs.len(), expected.len()));
        }
        for (iv, exp) in ivs.iter().zip(&expected) {
            let mut got: BTreeMap<String, u64> = BTreeMap::new();
            for (b, w) in traditional_bbv(iv).weights {
                *got.entry(text_of[&b].clone()).or_insert(0) += w as u64;
            }
            if &got != exp {
                return Err(format!("interval {} of {} differs from recount", iv.interval_index, spec.name));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} intervals"))
}

fn ac3c() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=3);
        let pts: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = Matrix::from_vec(n, d, pts.clone());
        let fit = kmeans_fit(&m, &KMeansConfig::new(2, trial), FeatureKind::Semantic).map_err(|e| e.to_string())?;
        let sse = |idx: &[usize]| -> f64 {
            let mut c = vec![0.0; d];
            for &i in idx {
                (0..d).for_each(|j| c[j] += pts[i * d + j] / idx.len() as f64);
            }
            idx.iter().map(|&i| (0..d).map(|j| (pts[i * d + j] - c[j]).powi(2)).sum::<f64>()).sum()
        };
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << (n - 1)) {
            let (a, b): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| mask >> i & 1 == 1);
            best = best.min(sse(&a) + sse(&b));
        }
        worst = worst.max((fit.inertia - best).abs());
    }
    if worst <= 1e-9 {
        Ok(format!("40 instances, max |inertia - optimum| {worst:.1e}"))
    } else {
        Err(format!("max |inertia - optimum| {worst:.3e} exceeds 1e-9"))
    }
}

fn ac3d() -> Result<String, String> {
    // Three separated clusters with one CPI each; dyadic values keep the
    // arithmetic exact.
    let cpis = [1.0, 1.5, 2.25];
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut truth: BTreeMap<String, f64> = BTreeMap::new();
    for p in 0..4 {
        let program = format!("prog-{p}");
        let mut sum = 0.0;
        for i in 0..8 {
            let c = rng.gen_range(0..3);
            let mut v = vec![0.0; 3];
            v[c] = 10.0;
            v.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
            rows.extend(v);
            records.push(IntervalRecord { program_id: program.clone(), interval_index: i, instrs: 4096, cpi_true: Some(cpis[c]) });
            sum += cpis[c];
        }
        truth.insert(program, sum / 8.0);
    }
    let m = Matrix::from_vec(records.len(), 3, rows);
    let lookup: HashMap<(String, usize), f64> =
        records.iter().map(|r| ((r.program_id.clone(), r.interval_index), r.cpi_true.unwrap())).collect();
    let report = cross_program_eval(&m, &records, &KMeansConfig::new(3, 1), FeatureKind::Semantic, 4096, |r| {
        lookup[&(r.program_id.clone(), r.interval_index)]
    })
    .map_err(|e| e.to_string())?;
    for p in &report.programs {
        if p.estimated_cpi != truth[&p.program_id] || p.true_cpi != truth[&p.program_id] {
            return Err(format!("{}: estimate {} vs truth {}", p.program_id, p.estimated_cpi, truth[&p.program_id]));
        }
    }
    Ok(format!("{} programs estimated exactly", report.programs.len()))
}

fn ac3() -> Outcome {
    let parts = [("ranking", ac3a()), ("bbv recount", ac3b()), ("k-means optimum", ac3c()), ("telescoping", ac3d())];
    let pass = parts.iter().all(|p| p.1.is_ok());
    let detail = parts
        .iter()
        .map(|(n, r)| match r {
            Ok(s) => format!("{n} ok ({s})"),
            Err(s) => format!("{n} FAILED ({s})"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

/// Output hashes of every manifest in `workdir`, by stage.
fn all_outputs(workdir: &Path) -> BTreeMap<String, BTreeMap<String, String>> {
    std::fs::read_dir(workdir.join("manifests"))
        .unwrap()
        .map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().trim_end_matches(".json").to_string();
            let m = StageManifest::load(workdir, &name).unwrap();
            (name, m.outputs)
        })
        .collect()
}

fn main() {
    let mut ok = true;
    let t = Instant::now();
    ok &= report("AC1", "permutation invariance", t, ac1());
    let t = Instant::now();
    ok &= report("AC2", "gradient correctness", t, ac2());
    let t = Instant::now();
    ok &= report("AC3", "exactness oracles", t, ac3());

    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let p = Pipeline::new(dir.path(), config.clone()).unwrap();
    let t = Instant::now();
    let run = (|| -> Result<_, sbbv_core::pipeline::PipelineError> {
        p.gen()?;
        p.ingest()?;
        p.pretrain()?;
        p.finetune_encoder()?;
        let bcsd = p.eval_bcsd()?;
        let stage1 = t.elapsed().as_secs_f64();
        p.embed()?;
        p.train_aggregator()?;
        p.sign()?;
        let intra_sem = p.estimate(EstimateMode::Intra, FeatureKind::Semantic, Some(8))?;
        let intra_trad = p.estimate(EstimateMode::Intra, FeatureKind::Traditional, Some(8))?;
        let cross = p.estimate(EstimateMode::Cross, FeatureKind::Semantic, Some(8))?;
        let stage2 = t.elapsed().as_secs_f64();
        let adapt = p.adapt()?;
        Ok((bcsd, stage1, intra_sem, intra_trad, cross, stage2, adapt))
    })();
    let (bcsd, stage1, intra_sem, intra_trad, cross, stage2, adapt) = match run {
        Ok(r) => r,
        Err(e) => {
            for id in ["AC4", "AC5", "AC6", "AC7", "AC8"] {
                println!("{id} FAIL pipeline run aborted: {e}");
            }
            std::process::exit(1);
        }
    };

    let mrr = bcsd.finetuned.mrr;
    let ratio = mrr / bcsd.random_baseline_mrr;
    ok &= report(
        "AC4",
        "function retrieval",
        t,
        outcome(
            mrr >= 0.70 && ratio >= 10.0 && bcsd.finetuned.pool_size == 100 && config.bcsd.train_functions >= 500,
            format!(
                "MRR {mrr:.4} at pool {} ({ratio:.1}x random {:.4}; pretrained only {:.4}), {} training functions, stage-1 {stage1:.0}s (need ≥ 0.70 and ≥ 10x)",
                bcsd.finetuned.pool_size, bcsd.random_baseline_mrr, bcsd.pretrained_only.mrr, config.bcsd.train_functions
            ),
        ),
    );

    let gap = 100.0 * (intra_sem.mean_accuracy - intra_trad.mean_accuracy);
    ok &= report(
        "AC5",
        "intra-program parity",
        t,
        outcome(
            gap.abs() <= 2.0 && intra_sem.programs.len() >= 8 && config.interval_len == 4096,
            format!(
                "semantic {:.2}% vs traditional {:.2}% ({gap:+.2} pp) over {} programs, k 8, total {stage2:.0}s (limit ±2 pp)",
                100.0 * intra_sem.mean_accuracy,
                100.0 * intra_trad.mean_accuracy,
                intra_sem.programs.len()
            ),
        ),
    );

    let expected_speedup = cross.total_instr as f64 / (8 * config.interval_len) as f64;
    ok &= report(
        "AC6",
        "cross-program estimation",
        t,
        outcome(
            cross.mean_accuracy >= 0.80
                && cross.speedup == expected_speedup
                && cross.simulated_instr == 8 * config.interval_len as u64
                && cross.programs.len() >= 8,
            format!(
                "mean accuracy {:.2}% over {} programs with {} representatives, speedup {} = {} / (8 x {}) (need ≥ 80%)",
                100.0 * cross.mean_accuracy,
                cross.programs.len(),
                cross.representatives.len(),
                cross.speedup,
                cross.total_instr,
                config.interval_len
            ),
        ),
    );

    ok &= report(
        "AC7",
        "adaptability",
        t,
        outcome(
            adapt.improvement_pp >= 5.0 && adapt.tuning_programs.len() == 2 && adapt.dataset_fraction <= 0.2,
            format!(
                "zero-shot {:.2}% -> adapted {:.2}% ({:+.2} pp) on {} held-out programs, tuned on {} intervals of {:?} (need ≥ +5 pp)",
                100.0 * adapt.zero_shot_mean,
                100.0 * adapt.adapted_mean,
                adapt.improvement_pp,
                adapt.held_out.len(),
                adapt.tuning_intervals,
                adapt.tuning_programs
            ),
        ),
    );

    // In-place reruns of the default run's cheaper stages, then two
    // independent small runs of every stage.
    let t = Instant::now();
    let before = all_outputs(dir.path());
    let rerun = (|| -> Result<(), sbbv_core::pipeline::PipelineError> {
        p.gen()?;
        p.ingest()?;
        p.embed()?;
        p.train_aggregator()?;
        p.sign()?;
        p.estimate(EstimateMode::Cross, FeatureKind::Semantic, Some(8))?;
        p.adapt()?;
        Ok(())
    })();
    let after = all_outputs(dir.path());
    let mut mismatched: Vec<String> = before.keys().filter(|k| before.get(*k) != after.get(*k)).cloned().collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        Pipeline::new(d, RunConfig::quick()).unwrap().run_all().unwrap();
    }
    let (oa, ob) = (all_outputs(a.path()), all_outputs(b.path()));
    mismatched.extend(oa.keys().filter(|k| oa.get(*k) != ob.get(*k)).map(|k| format!("quick/{k}")));
    let files: usize = oa.values().map(BTreeMap::len).sum();
    ok &= report(
        "AC8",
        "reproducibility",
        t,
        outcome(
            rerun.is_ok() && mismatched.is_empty() && oa.len() == ob.len(),
            match (&rerun, mismatched.is_empty()) {
                (Err(e), _) => format!("rerun failed: {e}"),
                (Ok(()), true) => format!(
                    "7 stages rerun in place ({} manifests unchanged) and {} stages ({files} files) across two workdirs byte-identical",
                    before.len(),
                    oa.len()
                ),
                (Ok(()), false) => format!("outputs differ for {mismatched:?}"),
            },
        ),
    );

    if !ok {
        std::process::exit(1);
    }
}
