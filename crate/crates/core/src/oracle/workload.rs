//! Seeded synthetic workloads built from loop phases.

use super::OracleError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Relative tolerance between a phase's budget and its emitted instructions.
pub const BUDGET_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Compute,
    MemoryStream,
    MemoryRandom,
    Branchy,
    Mixed,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 5] =
        [PhaseKind::Compute, PhaseKind::MemoryStream, PhaseKind::MemoryRandom, PhaseKind::Branchy, PhaseKind::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Compute => "compute",
            PhaseKind::MemoryStream => "memory_stream",
            PhaseKind::MemoryRandom => "memory_random",
            PhaseKind::Branchy => "branchy",
            PhaseKind::Mixed => "mixed",
        }
    }

    fn default_working_set(self) -> u64 {
        match self {
            PhaseKind::MemoryStream => 16 << 10,
            PhaseKind::MemoryRandom => 256 << 10,
            PhaseKind::Mixed => 8 << 10,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    /// Dynamic instructions this phase should execute.
    pub budget: u64,
    /// Bytes touched by memory phases; a power of two. Defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_set: Option<u64>,
}

impl PhaseSpec {
    pub fn new(kind: PhaseKind, budget: u64) -> Self {
        PhaseSpec { kind, budget, working_set: None }
    }

    pub fn working_set(&self) -> u64 {
        self.working_set.unwrap_or_else(|| self.kind.default_working_set())
    }
}

/// A program description: seed for register and instruction choice, plus
/// the ordered phase plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "phase")]
    pub phases: Vec<PhaseSpec>,
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, OracleError> {
        toml::from_str(text).map_err(|e| OracleError::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workload spec serializes")
    }

    pub fn total_budget(&self) -> u64 {
        self.phases.iter().map(|p| p.budget).sum()
    }
}

// Memory phases live in disjoint regions below the stack.
const REGION_BASE: u64 = 0x1_0000;
const REGION_STRIDE: u64 = 0x4_0000;
const LCG_MUL: i64 = 6364136223846793005;
const LCG_INC: i64 = 1442695040888963407;

/// Registers the phase bodies may clobber. `rcx` counts iterations, `r15`
/// holds the generator state and `rdi` the input seed.
const WORK_REGS: &[&str] = &["rax", "rbx", "rdx", "rsi", "r8", "r9", "r10", "r11", "r12", "r13", "r14"];

/// A phase rendered as setup lines, loop-body lines and per-iteration cost.
struct PhaseCode {
    setup: Vec<String>,
    body: Vec<String>,
    /// Dynamic instructions per iteration, including the counter update.
    per_iter: u64,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    label: String,
}

impl Gen<'_> {
    fn regs(&mut self, n: usize) -> Vec<&'static str> {
        WORK_REGS.choose_multiple(self.rng, n).copied().collect()
    }

    fn alu(&mut self, dst: &str, src: &str) -> String {
        match self.rng.gen_range(0..9) {
            0 | 1 => format!("add {dst}, {src}"),
            2 => format!("sub {dst}, {src}"),
            3 => format!("xor {dst}, {src}"),
            4 => format!("imul {dst}, {src}"),
            5 => format!("shl {dst}, {}", self.rng.gen_range(1..4)),
            6 => format!("or {dst}, {src}"),
            7 => format!("lea {dst}, [{src}+{}]", self.rng.gen_range(1..64)),
            _ => format!("inc {dst}"),
        }
    }

    fn alu_run(&mut self, n: usize, regs: &[&str]) -> Vec<String> {
        (0..n)
            .map(|_| {
                let d = regs[self.rng.gen_range(0..regs.len())];
                let s = regs[self.rng.gen_range(0..regs.len())];
                self.alu(d, s)
            })
            .collect()
    }

    fn lcg_step() -> [String; 2] {
        [format!("imul r15, {LCG_MUL}"), format!("add r15, {LCG_INC}")]
    }

    fn compute(&mut self) -> PhaseCode {
        let n = self.rng.gen_range(3..6);
        let regs = self.regs(n);
        let setup = regs.iter().enumerate().map(|(i, r)| format!("mov {r}, {}", i + 1)).collect();
        let n = self.rng.gen_range(5..12);
        let body = self.alu_run(n, &regs);
        PhaseCode { per_iter: body.len() as u64 + 2, setup, body }
    }

    fn memory_stream(&mut self, base: u64, ws: u64) -> PhaseCode {
        let r = self.regs(3);
        let (ptr, val, acc) = (r[0], r[1], r[2]);
        let stride = [8u64, 16][self.rng.gen_range(0..2)];
        let mut body = vec![format!("mov {val}, [{ptr}+{base}]"), format!("add {acc}, {val}")];
        if self.rng.gen_bool(0.5) {
            body.push(format!("mov [{ptr}+{}], {acc}", base + 8 * self.rng.gen_range(0..4)));
        }
        body.push(format!("add {ptr}, {stride}"));
        body.push(format!("and {ptr}, {}", ws - 1));
        PhaseCode { per_iter: body.len() as u64 + 2, setup: vec![format!("mov {ptr}, 0")], body }
    }

    fn memory_random(&mut self, base: u64, ws: u64) -> PhaseCode {
        let r = self.regs(3);
        let (ptr, val, acc) = (r[0], r[1], r[2]);
        let mut body: Vec<String> = Self::lcg_step().into();
        body.push(format!("mov {ptr}, r15"));
        body.push(format!("shr {ptr}, 33"));
        body.push(format!("and {ptr}, {}", (ws - 1) & !7));
        body.push(format!("mov {val}, [{ptr}+{base}]"));
        body.push(format!("add {acc}, {val}"));
        if self.rng.gen_bool(0.5) {
            body.push(format!("xor {acc}, {ptr}"));
        }
        PhaseCode { per_iter: body.len() as u64 + 2, setup: vec![], body }
    }

    fn branchy(&mut self) -> PhaseCode {
        let regs = self.regs(3);
        let t = regs[0];
        let l = self.label.clone();
        let n = self.rng.gen_range(1..4);
        let mut body: Vec<String> = Self::lcg_step().into();
        body.push(format!("mov {t}, r15"));
        body.push(format!("shr {t}, {}", self.rng.gen_range(33..60)));
        body.push(format!("and {t}, 1"));
        body.push(format!("cmp {t}, 0"));
        let l_else = format!("{l}_else");
        let l_join = format!("{l}_join");
        body.push(format!("je {l_else}"));
        // Both arms execute the same number of instructions.
        let then_arm = self.alu_run(n, &regs[1..]);
        let else_arm = self.alu_run(n + 1, &regs[1..]);
        body.extend(then_arm);
        body.push(format!("jmp {l_join}"));
        body.push(format!("{l_else}:"));
        body.extend(else_arm);
        body.push(format!("{l_join}:"));
        PhaseCode { per_iter: 7 + n as u64 + 1 + 2, setup: vec![], body }
    }

    fn mixed(&mut self, base: u64, ws: u64) -> PhaseCode {
        let regs = self.regs(5);
        let (ptr, val) = (regs[0], regs[1]);
        let work = &regs[2..];
        let n = self.rng.gen_range(2..5);
        let mut body = self.alu_run(n, work);
        body.push(format!("mov {val}, [{ptr}+{base}]"));
        body.push(format!("add {}, {val}", work[0]));
        body.push(format!("add {ptr}, 8"));
        body.push(format!("and {ptr}, {}", ws - 1));
        let n = self.rng.gen_range(1..3);
        let tail = self.alu_run(n, work);
        body.extend(tail);
        let per_iter = body.len() as u64 + 2;
        let setup = std::iter::once(format!("mov {ptr}, 0")).chain(work.iter().map(|r| format!("mov {r}, 3"))).collect();
        PhaseCode { per_iter, setup, body }
    }
}

/// Renders `spec` as a dialect listing. Each phase is one counted loop;
/// the per-phase iteration count is chosen so executed instructions land
/// within [`BUDGET_TOLERANCE`] of the budget.
pub fn gen_program(spec: &WorkloadSpec) -> Result<String, OracleError> {
    if spec.phases.is_empty() {
        return Err(OracleError::BudgetInfeasible("workload has no phases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = String::new();
    let _ = writeln!(out, "; {} seed={}", spec.name, spec.seed);
    out.push_str("mov r15, rdi\n");
    out.push_str("xor r15, 88172645463325252\n");
    for (i, phase) in spec.phases.iter().enumerate() {
        let ws = phase.working_set();
        let memory = matches!(phase.kind, PhaseKind::MemoryStream | PhaseKind::MemoryRandom | PhaseKind::Mixed);
        if memory && (!ws.is_power_of_two() || !(64..=REGION_STRIDE).contains(&ws)) {
            return Err(OracleError::Spec(format!(
                "phase {i}: working set {ws} must be a power of two in [64, {REGION_STRIDE}]"
            )));
        }
        let base = REGION_BASE + REGION_STRIDE * (i as u64 % 3);
        let label = format!("p{i}");
        let mut g = Gen { rng: &mut rng, label: label.clone() };
        let code = match phase.kind {
            PhaseKind::Compute => g.compute(),
            PhaseKind::MemoryStream => g.memory_stream(base, ws),
            PhaseKind::MemoryRandom => g.memory_random(base, ws),
            PhaseKind::Branchy => g.branchy(),
            PhaseKind::Mixed => g.mixed(base, ws),
        };
        let fixed = code.setup.len() as u64 + 1;
        let iters = (phase.budget.saturating_sub(fixed) as f64 / code.per_iter as f64).round() as u64;
        let emitted = fixed + iters * code.per_iter;
        let err = (emitted as f64 - phase.budget as f64).abs() / phase.budget.max(1) as f64;
        if iters == 0 || err > BUDGET_TOLERANCE {
            return Err(OracleError::BudgetInfeasible(format!(
                "phase {i} ({}): budget {} cannot be met within 1% (loop step {} instructions)",
                phase.kind.name(),
                phase.budget,
                code.per_iter
            )));
        }
        let _ = writeln!(out, "; phase {i} {}", phase.kind.name());
        for l in &code.setup {
            let _ = writeln!(out, "    {l}");
        }
        let _ = writeln!(out, "    mov rcx, {iters}");
        let _ = writeln!(out, "{label}_loop:");
        for l in &code.body {
            if l.ends_with(':') {
                let _ = writeln!(out, "{l}");
            } else {
                let _ = writeln!(out, "    {l}");
            }
        }
        let _ = writeln!(out, "    dec rcx");
        let _ = writeln!(out, "    jne {label}_loop");
    }
    out.push_str("    ret\n");
    Ok(out)
}

/// Fixed prologue (`mov r15`, `xor r15`) and epilogue (`ret`) around the phases.
pub const FRAME_INSTRUCTIONS: u64 = 3;

/// Random phase plan with `min_phases..=max_phases` phases whose budgets are
/// whole multiples of `unit` instructions.
pub fn random_spec(name: &str, seed: u64, min_phases: usize, max_phases: usize, unit: u64, units: (u64, u64)) -> WorkloadSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_5bb5);
    let n = rng.gen_range(min_phases..=max_phases);
    let mut phases = Vec::with_capacity(n);
    let mut last = None;
    for _ in 0..n {
        let kind = loop {
            let k = *PhaseKind::ALL.choose(&mut rng).unwrap();
            if Some(k) != last {
                break k;
            }
        };
        last = Some(kind);
        let budget = unit * rng.gen_range(units.0..=units.1);
        let working_set = match kind {
            PhaseKind::MemoryStream => Some([8u64 << 10, 16 << 10, 32 << 10][rng.gen_range(0..3)]),
            PhaseKind::MemoryRandom => Some([64u64 << 10, 128 << 10, 256 << 10][rng.gen_range(0..3)]),
            _ => None,
        };
        phases.push(PhaseSpec { kind, budget, working_set });
    }
    WorkloadSpec { name: name.to_string(), seed, phases }
}

/// `count` programs named `{prefix}-NN`, seeds split from `root_seed`.
pub fn suite(prefix: &str, root_seed: u64, count: usize, unit: u64) -> Vec<WorkloadSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    (0..count)
        .map(|i| {
            let seed = rng.gen();
            random_spec(&format!("{prefix}-{i:02}"), seed, 3, 6, unit, (3, 8))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{interp::interpret, Program};

    fn run(spec: &WorkloadSpec) -> usize {
        let p = Program::parse(&spec.name, &gen_program(spec).unwrap()).unwrap();
        interpret(&p, 1, 10_000_000).unwrap().len()
    }

    #[test]
    fn every_kind_meets_budget() {
        for kind in PhaseKind::ALL {
            for seed in 0..5 {
                let spec = WorkloadSpec { name: "t".into(), seed, phases: vec![PhaseSpec::new(kind, 20_000)] };
                let n = run(&spec) as f64 - FRAME_INSTRUCTIONS as f64;
                assert!((n - 20_000.0).abs() / 20_000.0 <= BUDGET_TOLERANCE, "{kind:?} seed {seed}: {n}");
            }
        }
    }

    #[test]
    fn same_seed_same_text() {
        let a = suite("s", 3, 4, 4096);
        let b = suite("s", 3, 4, 4096);
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(gen_program(s).unwrap(), gen_program(s).unwrap());
        }
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let spec = WorkloadSpec { name: "t".into(), seed: 0, phases: vec![PhaseSpec::new(PhaseKind::Compute, 5)] };
        assert!(matches!(gen_program(&spec), Err(OracleError::BudgetInfeasible(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let spec = random_spec("x", 9, 3, 6, 4096, (3, 8));
        assert_eq!(WorkloadSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let parsed = WorkloadSpec::from_toml(
            "name = \"a\"\nseed = 1\n[[phase]]\nkind = \"memory_random\"\nbudget = 8192\nworking_set = 65536\n",
        )
        .unwrap();
        assert_eq!(parsed.phases[0].working_set(), 65536);
    }
}
