//! Synthetic workloads, a deterministic interpreter and the analytical cost
//! models that supply ground-truth CPI.

mod cost;
mod interp;
mod program;
mod workload;

pub use cost::{base_cycles, instruction_cycles, interval_cpi, program_cpi, CostModel, CostModelKind};
pub use interp::{interpret, render_trace, segment_events, trace_lines, ExecEvent, InstrClass, MEM_SIZE};
pub use program::{nested_loop_listing, Program, CODE_BASE};
pub use workload::{
    gen_program, random_spec, suite, PhaseKind, PhaseSpec, WorkloadSpec, BUDGET_TOLERANCE, FRAME_INSTRUCTIONS,
};

use crate::asmnorm::AsmError;
use thiserror::Error;

/// Hard cap on executed instructions per run.
pub const MAX_INSTRUCTIONS: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid operands: {0}")]
    InvalidOperands(String),
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("workload spec: {0}")]
    Spec(String),
    #[error("execution exceeded {0} instructions")]
    Runaway(usize),
    #[error("cpi records line {line}: {reason}")]
    CpiFormat { line: usize, reason: String },
}

/// A generated program and its execution.
#[derive(Clone, Debug)]
pub struct Run {
    pub program: Program,
    pub events: Vec<ExecEvent>,
}

impl Run {
    pub fn interval_cpi(&self, model: &CostModel, interval_len: usize) -> Vec<f64> {
        interval_cpi(model, &self.events, interval_len)
    }

    pub fn trace_text(&self) -> String {
        render_trace(&self.program, &self.events)
    }
}

pub fn run_workload(spec: &WorkloadSpec, input_seed: u64) -> Result<Run, OracleError> {
    let program = Program::parse(&spec.name, &gen_program(spec)?)?;
    let events = interpret(&program, input_seed, MAX_INSTRUCTIONS)?;
    Ok(Run { program, events })
}

/// One ground-truth record.
#[derive(Clone, Debug, PartialEq)]
pub struct CpiRecord {
    pub program: String,
    pub interval_index: usize,
    pub cpi: f64,
}

/// Line-delimited `program<TAB>interval_index<TAB>cpi`. CPI is written with
/// shortest round-trip formatting, so parsing restores the exact value.
pub fn cpi_records_to_text(records: &[CpiRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\t{}\n", r.program, r.interval_index, r.cpi)).collect()
}

pub fn cpi_records_from_text(text: &str) -> Result<Vec<CpiRecord>, OracleError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| OracleError::CpiFormat { line: i + 1, reason: reason.to_string() };
        let mut f = line.split('\t');
        let (Some(p), Some(idx), Some(cpi), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad("expected three TAB-separated fields"));
        };
        out.push(CpiRecord {
            program: p.to_string(),
            interval_index: idx.parse().map_err(|_| bad("bad interval index"))?,
            cpi: cpi.parse().map_err(|_| bad("bad cpi"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nops_cost_one_cycle() {
        let p = Program::parse("n", &"nop\n".repeat(10)).unwrap();
        let ev = interpret(&p, 0, 100).unwrap();
        assert_eq!(interval_cpi(&CostModel::simple(), &ev, 10), vec![1.0]);
    }

    #[test]
    fn eight_loads_one_line_hand_traced() {
        let mut src = String::from("mov rbx, 8192\n");
        for i in 0..8 {
            src.push_str(&format!("mov rax, [rbx+{}]\n", i * 8));
        }
        let p = Program::parse("l", &src).unwrap();
        let ev = interpret(&p, 0, 100).unwrap();
        // Interval = the 8 loads: one cold miss (1 + 20) plus seven hits.
        let cycles = instruction_cycles(&CostModel::simple(), &ev);
        let cpi = cycles[1..].iter().sum::<f64>() / 8.0;
        assert_eq!(cpi, (21.0 + 7.0) / 8.0);
    }

    #[test]
    fn random_memory_costs_more_than_streaming() {
        let mk = |kind| WorkloadSpec { name: "m".into(), seed: 4, phases: vec![PhaseSpec::new(kind, 40_000)] };
        let model = CostModel::simple();
        let stream = program_cpi(&model, &run_workload(&mk(PhaseKind::MemoryStream), 0).unwrap().events);
        let random = program_cpi(&model, &run_workload(&mk(PhaseKind::MemoryRandom), 0).unwrap().events);
        assert!(random > stream, "random {random} stream {stream}");
    }

    #[test]
    fn compute_phase_has_a_dominant_block() {
        let spec = WorkloadSpec { name: "c".into(), seed: 2, phases: vec![PhaseSpec::new(PhaseKind::Compute, 30_000)] };
        let run = run_workload(&spec, 0).unwrap();
        let seg = segment_events(&run.program, &run.events);
        let mut per_block = std::collections::HashMap::new();
        for e in &seg.execs {
            *per_block.entry(e.id).or_insert(0usize) += e.len;
        }
        let top = *per_block.values().max().unwrap();
        assert!(top as f64 >= 0.9 * seg.instr_total() as f64);
    }

    #[test]
    fn models_separate_and_respect_lower_bounds() {
        let spec = WorkloadSpec { name: "c".into(), seed: 1, phases: vec![PhaseSpec::new(PhaseKind::Compute, 20_000)] };
        let run = run_workload(&spec, 0).unwrap();
        let s = run.interval_cpi(&CostModel::simple(), 4096);
        let c = run.interval_cpi(&CostModel::complex(), 4096);
        assert!(s.iter().zip(&c).any(|(a, b)| a != b));
        assert!(s.iter().all(|&x| x >= 1.0));
        assert!(c.iter().all(|&x| x >= 0.5));
    }

    #[test]
    fn streaming_warms_up() {
        let spec = WorkloadSpec {
            name: "w".into(),
            seed: 0,
            phases: vec![PhaseSpec { kind: PhaseKind::MemoryStream, budget: 40_000, working_set: Some(2048) }],
        };
        let cpi = run_workload(&spec, 0).unwrap().interval_cpi(&CostModel::simple(), 4096);
        assert!(cpi[1..cpi.len() - 1].iter().all(|&x| x <= cpi[0]));
    }

    #[test]
    fn cpi_records_roundtrip_exactly() {
        let r = vec![CpiRecord { program: "a".into(), interval_index: 3, cpi: 1.0 / 3.0 }];
        assert_eq!(cpi_records_from_text(&cpi_records_to_text(&r)).unwrap(), r);
        assert!(cpi_records_from_text("a\t1").is_err());
    }
}
