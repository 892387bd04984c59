//! Trace ingestion: basic-block segmentation, the content-addressed block
//! store, fixed-length interval slicing and traditional BBVs.
//!
//! Trace lines are `<pc-hex>\t<asm-text>`. Dialect instructions are a fixed
//! [`INSTR_BYTES`] wide, so a line whose pc is not `prev + INSTR_BYTES` is a
//! taken-branch target and starts a new block.

use crate::asmnorm::{normalize, parse_instruction, AsmError, Instruction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const INSTR_BYTES: u64 = 4;
pub const DEFAULT_INTERVAL_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: AsmError },
    #[error("trace line {line}: {reason}")]
    TraceFormat { line: usize, reason: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("interval length must be at least 1")]
    InvalidIntervalLen,
    #[error("block id {0} collides with a different block")]
    Collision(BlockId),
    #[error("block store: {0}")]
    StoreFormat(String),
}

/// Content hash of a block's normalized text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for BlockId {
    type Err = BlockError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(BlockId).map_err(|_| BlockError::StoreFormat(format!("bad block id `{s}`")))
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    /// Normalizes and hashes. Identical normalized text ⇒ identical id,
    /// whichever program it came from.
    pub fn new(instructions: &[Instruction]) -> Self {
        let instructions: Vec<Instruction> = instructions.iter().map(normalize).collect();
        let id = block_id(&instructions);
        BasicBlock { id, instructions }
    }

    pub fn static_len(&self) -> usize {
        self.instructions.len()
    }

    pub fn text(&self) -> String {
        self.instructions.iter().map(Instruction::text).collect::<Vec<_>>().join("\n")
    }
}

pub fn block_id(normalized: &[Instruction]) -> BlockId {
    let mut h = Sha256::new();
    for (i, ins) in normalized.iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(ins.text().as_bytes());
    }
    let digest = h.finalize();
    BlockId(u64::from_be_bytes(digest[..8].try_into().unwrap()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLine {
    pub pc: u64,
    pub instruction: Instruction,
}

pub fn format_trace_line(pc: u64, asm: &str) -> String {
    format!("{pc:x}\t{asm}")
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>, BlockError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (pc_s, asm) = line
            .split_once('\t')
            .ok_or_else(|| BlockError::TraceFormat { line: line_no, reason: "missing TAB after pc".into() })?;
        let pc_s = pc_s.trim();
        let pc_s = pc_s.strip_prefix("0x").unwrap_or(pc_s);
        let pc = u64::from_str_radix(pc_s, 16)
            .map_err(|_| BlockError::TraceFormat { line: line_no, reason: format!("bad pc `{pc_s}`") })?;
        let instruction = parse_instruction(asm, line_no)
            .map_err(|source| BlockError::Parse { line: line_no, source })?
            .ok_or_else(|| BlockError::TraceFormat { line: line_no, reason: "no instruction".into() })?;
        out.push(TraceLine { pc, instruction });
    }
    Ok(out)
}

/// One dynamic execution of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockExec {
    pub id: BlockId,
    pub len: usize,
}

/// Streaming segmenter. Feed executed instructions in order; each completed
/// block comes back as an execution record, together with the block itself
/// the first time its id is seen.
#[derive(Default)]
pub struct Segmenter {
    pending: Vec<Instruction>,
    last_pc: Option<u64>,
    seen: HashMap<BlockId, usize>,
}

impl Segmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pc: u64, ins: &Instruction) -> Vec<(BlockExec, Option<BasicBlock>)> {
        let mut out = Vec::new();
        if let Some(last) = self.last_pc {
            if !self.pending.is_empty() && pc != last.wrapping_add(INSTR_BYTES) {
                out.extend(self.flush());
            }
        }
        self.pending.push(ins.clone());
        self.last_pc = Some(pc);
        if ins.is_control_transfer() {
            out.extend(self.flush());
        }
        out
    }

    /// Emits the trailing partial block, if any.
    pub fn flush(&mut self) -> Option<(BlockExec, Option<BasicBlock>)> {
        if self.pending.is_empty() {
            return None;
        }
        let block = BasicBlock::new(&self.pending);
        self.pending.clear();
        let exec = BlockExec { id: block.id, len: block.static_len() };
        let first = !self.seen.contains_key(&block.id);
        if first {
            self.seen.insert(block.id, block.static_len());
        }
        Some((exec, first.then_some(block)))
    }
}

/// A program's segmented execution.
#[derive(Clone, Debug, Default)]
pub struct SegmentedTrace {
    /// Distinct blocks in first-seen order.
    pub blocks: Vec<BasicBlock>,
    pub execs: Vec<BlockExec>,
}

impl SegmentedTrace {
    pub fn instr_total(&self) -> usize {
        self.execs.iter().map(|e| e.len).sum()
    }
}

pub fn segment_trace<'a>(lines: impl IntoIterator<Item = &'a TraceLine>) -> SegmentedTrace {
    let mut seg = Segmenter::new();
    let mut out = SegmentedTrace::default();
    let record = |(exec, block): (BlockExec, Option<BasicBlock>), out: &mut SegmentedTrace| {
        out.execs.push(exec);
        if let Some(b) = block {
            out.blocks.push(b);
        }
    };
    for line in lines {
        for item in seg.push(line.pc, &line.instruction) {
            record(item, &mut out);
        }
    }
    if let Some(item) = seg.flush() {
        record(item, &mut out);
    }
    out
}

/// Instructions of one block executed inside one interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub block: BlockId,
    pub static_len: usize,
    /// Instructions of this block that executed in the interval. A block
    /// straddling a boundary contributes only the instructions on this side.
    pub instrs: u64,
}

impl BlockCount {
    /// Possibly fractional execution count.
    pub fn count(&self) -> f64 {
        self.instrs as f64 / self.static_len as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalProfile {
    pub program_id: String,
    pub interval_index: usize,
    /// Sorted by block id.
    pub counts: Vec<BlockCount>,
    pub instr_total: u64,
    pub partial: bool,
    pub cpi_true: Option<f64>,
}

/// Consecutive non-overlapping windows of `interval_len` instructions. The
/// last window is kept and flagged `partial` when shorter.
pub fn slice_intervals(program_id: &str, execs: &[BlockExec], interval_len: usize) -> Result<Vec<IntervalProfile>, BlockError> {
    if interval_len == 0 {
        return Err(BlockError::InvalidIntervalLen);
    }
    if execs.iter().all(|e| e.len == 0) {
        return Err(BlockError::EmptyTrace);
    }
    let mut out = Vec::new();
    let mut cur: BTreeMap<BlockId, (usize, u64)> = BTreeMap::new();
    let mut filled = 0usize;
    let close = |cur: &mut BTreeMap<BlockId, (usize, u64)>, filled: usize, out: &mut Vec<IntervalProfile>| {
        let counts = std::mem::take(cur)
            .into_iter()
            .map(|(block, (static_len, instrs))| BlockCount { block, static_len, instrs })
            .collect();
        out.push(IntervalProfile {
            program_id: program_id.to_string(),
            interval_index: out.len(),
            counts,
            instr_total: filled as u64,
            partial: filled < interval_len,
            cpi_true: None,
        });
    };
    for e in execs {
        let mut remaining = e.len;
        while remaining > 0 {
            let take = remaining.min(interval_len - filled);
            let slot = cur.entry(e.id).or_insert((e.len, 0));
            slot.1 += take as u64;
            filled += take;
            remaining -= take;
            if filled == interval_len {
                close(&mut cur, filled, &mut out);
                filled = 0;
            }
        }
    }
    if filled > 0 {
        close(&mut cur, filled, &mut out);
    }
    Ok(out)
}

/// Per-program first-seen index assignment for traditional BBVs.
#[derive(Clone, Debug, Default)]
pub struct BbvSpace {
    index: HashMap<BlockId, usize>,
    order: Vec<BlockId>,
}

impl BbvSpace {
    pub fn from_first_seen(ids: impl IntoIterator<Item = BlockId>) -> Self {
        let mut s = BbvSpace::default();
        for id in ids {
            if let std::collections::hash_map::Entry::Vacant(e) = s.index.entry(id) {
                e.insert(s.order.len());
                s.order.push(id);
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn index_of(&self, id: BlockId) -> Option<usize> {
        self.index.get(&id).copied()
    }
}

/// Instruction-weighted basic block vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TraditionalBbv {
    /// Sorted by block id; weight = count × static_len.
    pub weights: Vec<(BlockId, f64)>,
}

pub fn traditional_bbv(iv: &IntervalProfile) -> TraditionalBbv {
    TraditionalBbv { weights: iv.counts.iter().map(|c| (c.block, c.instrs as f64)).collect() }
}

impl TraditionalBbv {
    pub fn l1(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w.abs()).sum()
    }

    pub fn normalize_l1(&self) -> TraditionalBbv {
        let n = self.l1();
        TraditionalBbv { weights: self.weights.iter().map(|&(b, w)| (b, if n > 0.0 { w / n } else { w })).collect() }
    }

    pub fn to_dense(&self, space: &BbvSpace) -> Vec<f64> {
        let mut v = vec![0.0; space.dim()];
        for &(b, w) in &self.weights {
            if let Some(i) = space.index_of(b) {
                v[i] = w;
            }
        }
        v
    }

    /// Cosine over the shared block-id space.
    pub fn cosine(&self, other: &TraditionalBbv) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < self.weights.len() && j < other.weights.len() {
            match self.weights[i].0.cmp(&other.weights[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += self.weights[i].1 * other.weights[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let na = self.weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let nb = other.weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Global registry of distinct blocks across programs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockStore {
    blocks: BTreeMap<BlockId, BasicBlock>,
}

impl BlockStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` when the block was not yet present.
    pub fn insert(&mut self, block: BasicBlock) -> Result<bool, BlockError> {
        match self.blocks.get(&block.id) {
            Some(existing) if existing.instructions != block.instructions => {
                if existing.text() != block.text() {
                    return Err(BlockError::Collision(block.id));
                }
                Ok(false)
            }
            Some(_) => Ok(false),
            None => {
                self.blocks.insert(block.id, block);
                Ok(true)
            }
        }
    }

    pub fn get(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.get(&id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Blocks in id order.
    pub fn iter(&self) -> impl Iterator<Item = &BasicBlock> {
        self.blocks.values()
    }

    /// `block <id> <static_len>` followed by one TAB-indented instruction per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for b in self.blocks.values() {
            s.push_str(&format!("block {} {}\n", b.id, b.static_len()));
            for ins in &b.instructions {
                s.push('\t');
                s.push_str(&ins.text());
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BlockError> {
        let mut store = BlockStore::new();
        let mut header: Option<(BlockId, usize)> = None;
        let mut body: Vec<Instruction> = Vec::new();
        let mut finish = |header: Option<(BlockId, usize)>, body: &mut Vec<Instruction>| -> Result<(), BlockError> {
            if let Some((id, len)) = header {
                let block = BasicBlock::new(body);
                if block.id != id || block.static_len() != len {
                    return Err(BlockError::StoreFormat(format!("record {id} does not match its content")));
                }
                store.insert(block)?;
                body.clear();
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(asm) = line.strip_prefix('\t') {
                let ins = parse_instruction(asm, i + 1)
                    .map_err(|source| BlockError::Parse { line: i + 1, source })?
                    .ok_or_else(|| BlockError::StoreFormat(format!("line {}: empty instruction", i + 1)))?;
                body.push(ins);
            } else if let Some(rest) = line.strip_prefix("block ") {
                finish(header.take(), &mut body)?;
                let mut parts = rest.split_whitespace();
                let id: BlockId = parts.next().unwrap_or("").parse()?;
                let len = parts
                    .next()
                    .and_then(|l| l.parse().ok())
                    .ok_or_else(|| BlockError::StoreFormat(format!("line {}: missing static_len", i + 1)))?;
                header = Some((id, len));
            } else if !line.trim().is_empty() {
                return Err(BlockError::StoreFormat(format!("line {}: unexpected `{line}`", i + 1)));
            }
        }
        finish(header, &mut body)?;
        Ok(store)
    }
}

pub fn intervals_to_jsonl(ivs: &[IntervalProfile]) -> String {
    ivs.iter().map(|iv| serde_json::to_string(iv).expect("interval serializes") + "\n").collect()
}

pub fn intervals_from_jsonl(text: &str) -> Result<Vec<IntervalProfile>, BlockError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| BlockError::StoreFormat(format!("interval record {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asmnorm::parse_listing;

    fn trace_of(asm: &[&str]) -> Vec<TraceLine> {
        asm.iter()
            .enumerate()
            .map(|(i, a)| TraceLine { pc: 0x1000 + INSTR_BYTES * i as u64, instruction: parse_listing(a).unwrap().remove(0) })
            .collect()
    }

    #[test]
    fn jump_terminates_block() {
        let seg = segment_trace(&trace_of(&["add rax, rbx", "cmp rax, 5", "jne L1", "mov rcx, rax", "jmp L2"]));
        assert_eq!(seg.blocks.len(), 2);
        assert_eq!(seg.blocks[0].text(), "add rax, rbx\ncmp rax, IMM\njne LABEL");
        assert_eq!(seg.blocks[1].text(), "mov rcx, rax\njmp LABEL");
    }

    #[test]
    fn non_sequential_pc_starts_block() {
        let mut t = trace_of(&["add rax, rbx", "inc rcx", "inc rdx"]);
        t[2].pc = 0x4000;
        let seg = segment_trace(&t);
        assert_eq!(seg.execs.iter().map(|e| e.len).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn identical_text_shares_id_across_programs() {
        let a = segment_trace(&trace_of(&["mov rax, 1", "ret"]));
        let b = segment_trace(&trace_of(&["mov rax, 99", "ret"]));
        assert_eq!(a.blocks[0].id, b.blocks[0].id);
    }

    #[test]
    fn slicing_with_partial_tail() {
        let execs: Vec<BlockExec> = (0..10).map(|_| BlockExec { id: BlockId(1), len: 1 }).collect();
        let ivs = slice_intervals("p", &execs, 4).unwrap();
        assert_eq!(ivs.iter().map(|i| i.instr_total).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(ivs.iter().map(|i| i.partial).collect::<Vec<_>>(), vec![false, false, true]);
    }

    #[test]
    fn counts_and_instr_total() {
        let a = BlockExec { id: BlockId(0xa), len: 3 };
        let b = BlockExec { id: BlockId(0xb), len: 2 };
        let ivs = slice_intervals("p", &[a, a, b, a, a], 14).unwrap();
        assert_eq!(ivs.len(), 1);
        let iv = &ivs[0];
        assert_eq!(iv.instr_total, 14);
        assert_eq!(iv.counts.iter().map(|c| c.count()).collect::<Vec<_>>(), vec![4.0, 1.0]);
    }

    #[test]
    fn straddling_block_is_split_proportionally() {
        let a = BlockExec { id: BlockId(1), len: 3 };
        let ivs = slice_intervals("p", &[a, a, a], 4).unwrap();
        assert_eq!(ivs[0].counts[0].instrs, 4);
        assert!((ivs[0].counts[0].count() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(ivs[1].counts[0].instrs, 4);
        assert_eq!(ivs[2].counts[0].instrs, 1);
    }

    #[test]
    fn empty_and_zero_len_errors() {
        assert!(matches!(slice_intervals("p", &[], 4), Err(BlockError::EmptyTrace)));
        assert!(matches!(slice_intervals("p", &[BlockExec { id: BlockId(1), len: 1 }], 0), Err(BlockError::InvalidIntervalLen)));
    }

    #[test]
    fn bbv_weights_and_normalization() {
        let a = BlockExec { id: BlockId(0xa), len: 3 };
        let b = BlockExec { id: BlockId(0xb), len: 2 };
        let iv = &slice_intervals("p", &[a, a, a, a, b], 100).unwrap()[0];
        let bbv = traditional_bbv(iv);
        assert_eq!(bbv.weights, vec![(BlockId(0xa), 12.0), (BlockId(0xb), 2.0)]);
        assert_eq!(bbv.l1(), iv.instr_total as f64);
        let n = bbv.normalize_l1();
        assert_eq!(n.weights, vec![(BlockId(0xa), 12.0 / 14.0), (BlockId(0xb), 2.0 / 14.0)]);
        assert!((n.weights[0].1 - 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn single_block_normalizes_to_one() {
        let iv = &slice_intervals("p", &[BlockExec { id: BlockId(5), len: 2 }], 100).unwrap()[0];
        assert_eq!(traditional_bbv(iv).normalize_l1().weights[0].1, 1.0);
    }

    #[test]
    fn dense_uses_first_seen_order() {
        let space = BbvSpace::from_first_seen([BlockId(9), BlockId(2), BlockId(9)]);
        assert_eq!(space.dim(), 2);
        let bbv = TraditionalBbv { weights: vec![(BlockId(2), 1.0), (BlockId(9), 3.0)] };
        assert_eq!(bbv.to_dense(&space), vec![3.0, 1.0]);
    }

    #[test]
    fn store_text_roundtrip() {
        let seg = segment_trace(&trace_of(&["mov rax, [rsp+8]", "jne L", "push rbp", "ret"]));
        let mut store = BlockStore::new();
        for b in seg.blocks {
            assert!(store.insert(b).unwrap());
        }
        let text = store.to_text();
        assert_eq!(BlockStore::from_text(&text).unwrap(), store);
        assert!(BlockStore::from_text("block 0000000000000001 1\n\tnop\n").is_err());
    }

    #[test]
    fn trace_parse_errors_carry_line() {
        assert!(matches!(parse_trace("1000\tnop\n1004 nop"), Err(BlockError::TraceFormat { line: 2, .. })));
        assert!(matches!(parse_trace("1000\tmov rax, [rsp"), Err(BlockError::Parse { line: 1, .. })));
        let t = parse_trace("0x1000\tnop\n1004\tret\n").unwrap();
        assert_eq!(t[1].pc, 0x1004);
    }
}
