//! Analytical CPI: base cycles plus cache-miss and misprediction penalties.

use super::interp::{ExecEvent, InstrClass};
use serde::{Deserialize, Serialize};

const LINE_BYTES: u64 = 64;
const CACHE_SETS: usize = 64;
const PREDICTOR_ENTRIES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModelKind {
    Simple,
    Complex,
}

impl std::str::FromStr for CostModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simple" => Ok(CostModelKind::Simple),
            "complex" => Ok(CostModelKind::Complex),
            other => Err(format!("unknown cost model `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub miss_penalty: f64,
    pub mispredict_penalty: f64,
    /// Divides the base-cycle component.
    pub issue_width: f64,
}

impl CostModel {
    pub fn simple() -> Self {
        CostModel { miss_penalty: 20.0, mispredict_penalty: 3.0, issue_width: 1.0 }
    }

    /// Deeper pipeline, slower memory, wider issue.
    pub fn complex() -> Self {
        CostModel { miss_penalty: 40.0, mispredict_penalty: 12.0, issue_width: 2.0 }
    }

    pub fn of(kind: CostModelKind) -> Self {
        match kind {
            CostModelKind::Simple => Self::simple(),
            CostModelKind::Complex => Self::complex(),
        }
    }
}

pub fn base_cycles(class: InstrClass) -> f64 {
    match class {
        InstrClass::Mul => 3.0,
        InstrClass::CallRet => 2.0,
        _ => 1.0,
    }
}

/// Direct-mapped data cache.
struct Cache {
    tags: [Option<u64>; CACHE_SETS],
}

impl Cache {
    fn access(&mut self, addr: u64) -> bool {
        let line = addr / LINE_BYTES;
        let set = (line % CACHE_SETS as u64) as usize;
        let hit = self.tags[set] == Some(line);
        self.tags[set] = Some(line);
        hit
    }
}

/// Table of 2-bit saturating counters indexed by instruction index.
struct Predictor {
    counters: [u8; PREDICTOR_ENTRIES],
}

impl Predictor {
    fn predict_and_update(&mut self, index: u32, taken: bool) -> bool {
        let c = &mut self.counters[index as usize % PREDICTOR_ENTRIES];
        let correct = (*c >= 2) == taken;
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
        correct
    }
}

/// Per-instruction cycles for a whole execution. Cache and predictor state
/// carries across interval boundaries.
pub fn instruction_cycles(model: &CostModel, events: &[ExecEvent]) -> Vec<f64> {
    let mut cache = Cache { tags: [None; CACHE_SETS] };
    // Weakly not-taken.
    let mut pred = Predictor { counters: [1; PREDICTOR_ENTRIES] };
    events
        .iter()
        .map(|e| {
            let mut c = base_cycles(e.class) / model.issue_width;
            if let Some(a) = e.mem {
                if !cache.access(a) {
                    c += model.miss_penalty;
                }
            }
            if let Some(t) = e.taken {
                if !pred.predict_and_update(e.index, t) {
                    c += model.mispredict_penalty;
                }
            }
            c
        })
        .collect()
}

/// Mean CPI over each consecutive window of `interval_len` instructions,
/// the last window possibly shorter.
pub fn interval_cpi(model: &CostModel, events: &[ExecEvent], interval_len: usize) -> Vec<f64> {
    assert!(interval_len > 0, "interval length must be positive");
    instruction_cycles(model, events)
        .chunks(interval_len)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

/// Whole-run CPI.
pub fn program_cpi(model: &CostModel, events: &[ExecEvent]) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    instruction_cycles(model, events).iter().sum::<f64>() / events.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(class: InstrClass, mem: Option<u64>, taken: Option<bool>) -> ExecEvent {
        ExecEvent { index: 0, class, mem, taken }
    }

    #[test]
    fn base_only() {
        let e = [ev(InstrClass::Alu, None, None), ev(InstrClass::Mul, None, None), ev(InstrClass::CallRet, None, None)];
        assert_eq!(instruction_cycles(&CostModel::simple(), &e), vec![1.0, 3.0, 2.0]);
        assert_eq!(instruction_cycles(&CostModel::complex(), &e), vec![0.5, 1.5, 1.0]);
    }

    #[test]
    fn cold_miss_then_hit_then_conflict() {
        let e = [
            ev(InstrClass::Move, Some(0), None),
            ev(InstrClass::Move, Some(63), None),
            ev(InstrClass::Move, Some(64 * 64), None),
            ev(InstrClass::Move, Some(0), None),
        ];
        assert_eq!(instruction_cycles(&CostModel::simple(), &e), vec![21.0, 1.0, 21.0, 21.0]);
    }

    #[test]
    fn predictor_learns_taken() {
        let e: Vec<_> = (0..4).map(|_| ev(InstrClass::Branch, None, Some(true))).collect();
        // Counter starts at 1: first taken mispredicts, then predicts taken.
        assert_eq!(instruction_cycles(&CostModel::simple(), &e), vec![4.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn interval_windows() {
        let e: Vec<_> = (0..5).map(|_| ev(InstrClass::Mul, None, None)).collect();
        assert_eq!(interval_cpi(&CostModel::simple(), &e, 2), vec![3.0, 3.0, 3.0]);
    }
}
