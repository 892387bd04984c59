//! Synthetic function corpus with semantics-preserving rewrites, used for
//! similarity fine-tuning and evaluation.

use crate::asmnorm::{normalize, EncodedToken, Instruction, MemRef, Operand, Register, SemanticTable, Vocabulary, GP64};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    /// Consistent permutation of the general-purpose registers.
    RenameRegisters,
    /// Swap adjacent instructions with no data, flag or memory dependence.
    Reorder,
    /// `imul r, 2` ↔ `shl r, 1`.
    StrengthReduce,
    InsertNops,
}

impl Transform {
    pub const ALL: [Transform; 4] = [Transform::RenameRegisters, Transform::Reorder, Transform::StrengthReduce, Transform::InsertNops];
}

fn gp(name: &str) -> Operand {
    Operand::Reg(Register::lookup(name).expect("known register"))
}

fn mem(base: &str, disp: i64) -> Operand {
    Operand::Mem(MemRef { base: Register::lookup(base).expect("known register"), disp: Some(disp), displacement_present: true })
}

fn label(name: &str) -> Operand {
    Operand::Label(Some(name.to_string()))
}

/// A random straight-line-ish function of 6..=16 instructions ending in `ret`.
pub fn random_function(rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    // Functions favor a few registers so renaming has something to permute.
    let k = rng.gen_range(3..7);
    let regs: Vec<&str> = GP64.choose_multiple(rng, k).copied().collect();
    let r = |rng: &mut ChaCha8Rng| regs[rng.gen_range(0..regs.len())];
    let n = rng.gen_range(6..=16);
    let mut out = Vec::with_capacity(n + 1);
    let mut labels = 0;
    while out.len() < n {
        let (a, b) = (r(rng), r(rng));
        let imm = Operand::Imm(Some(rng.gen_range(1..256)));
        let disp = 8 * rng.gen_range(1..16);
        let base = ["rsp", "rbp", a][rng.gen_range(0..3)];
        let ins = match rng.gen_range(0..16) {
            0 => Instruction::new("mov", vec![gp(a), imm]),
            1 => Instruction::new("mov", vec![gp(a), mem(base, disp)]),
            2 => Instruction::new("mov", vec![mem(base, disp), gp(a)]),
            3 => Instruction::new("mov", vec![gp(a), gp(b)]),
            4 => Instruction::new("add", vec![gp(a), gp(b)]),
            5 => Instruction::new("add", vec![gp(a), imm]),
            6 => Instruction::new("sub", vec![gp(a), gp(b)]),
            7 => Instruction::new(["xor", "and", "or"][rng.gen_range(0..3)], vec![gp(a), gp(b)]),
            8 => Instruction::new("imul", vec![gp(a), Operand::Imm(Some(2))]),
            9 => Instruction::new("imul", vec![gp(a), gp(b)]),
            10 => Instruction::new("lea", vec![gp(a), mem(b, disp)]),
            11 => Instruction::new(["inc", "dec"][rng.gen_range(0..2)], vec![gp(a)]),
            12 => {
                out.push(Instruction::new(["cmp", "test"][rng.gen_range(0..2)], vec![gp(a), gp(b)]));
                labels += 1;
                Instruction::new(["je", "jne", "jl", "jge"][rng.gen_range(0..4)], vec![label(&format!(".L{labels}"))])
            }
            13 => Instruction::new("push", vec![gp(a)]),
            14 => Instruction::new("pop", vec![gp(a)]),
            _ => Instruction::new("call", vec![label("helper")]),
        };
        out.push(ins);
    }
    out.push(Instruction::new("ret", vec![]));
    out
}

fn rename(f: &[Instruction], rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    let mut perm: Vec<&str> = GP64.to_vec();
    perm.shuffle(rng);
    let map: HashMap<&str, &str> = GP64.iter().copied().zip(perm).collect();
    let sub = |r: Register| match map.get(r.name) {
        Some(n) => Register::lookup(n).unwrap(),
        None => r,
    };
    f.iter()
        .map(|ins| {
            let ops = ins
                .operands
                .iter()
                .map(|op| match op {
                    Operand::Reg(r) => Operand::Reg(sub(*r)),
                    Operand::Mem(m) => Operand::Mem(MemRef { base: sub(m.base), ..m.clone() }),
                    other => other.clone(),
                })
                .collect();
            Instruction::new(&ins.mnemonic, ops)
        })
        .collect()
}

fn regs_of(ins: &Instruction) -> Vec<u8> {
    ins.operands
        .iter()
        .filter_map(|op| match op {
            Operand::Reg(r) => Some(r.slot),
            Operand::Mem(m) => Some(m.base.slot),
            _ => None,
        })
        .collect()
}

fn touches_flags(ins: &Instruction) -> bool {
    !matches!(ins.mnemonic.as_str(), "mov" | "lea" | "nop")
}

fn independent(a: &Instruction, b: &Instruction) -> bool {
    let barrier = |i: &Instruction| i.is_control_transfer() || matches!(i.mnemonic.as_str(), "push" | "pop");
    let has_mem = |i: &Instruction| i.operands.iter().any(|o| matches!(o, Operand::Mem(_)));
    if barrier(a) || barrier(b) || (has_mem(a) && has_mem(b)) || (touches_flags(a) && touches_flags(b)) {
        return false;
    }
    let ra = regs_of(a);
    regs_of(b).iter().all(|r| !ra.contains(r))
}

fn reorder(f: &[Instruction], rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    let mut out = f.to_vec();
    for i in 0..out.len().saturating_sub(1) {
        // A flag producer right before a conditional branch must stay there.
        let feeds_branch = |j: usize| out.get(j + 1).is_some_and(|n| n.is_conditional_branch());
        if independent(&out[i], &out[i + 1]) && !feeds_branch(i + 1) && !feeds_branch(i) && rng.gen_bool(0.5) {
            out.swap(i, i + 1);
        }
    }
    out
}

fn strength_reduce(f: &[Instruction], rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    f.iter()
        .map(|ins| match (ins.mnemonic.as_str(), ins.operands.as_slice()) {
            ("imul", [dst @ Operand::Reg(_), Operand::Imm(Some(2))]) if rng.gen_bool(0.8) => {
                Instruction::new("shl", vec![dst.clone(), Operand::Imm(Some(1))])
            }
            ("shl", [dst @ Operand::Reg(_), Operand::Imm(Some(1))]) if rng.gen_bool(0.8) => {
                Instruction::new("imul", vec![dst.clone(), Operand::Imm(Some(2))])
            }
            _ => ins.clone(),
        })
        .collect()
}

fn insert_nops(f: &[Instruction], rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    let mut out = f.to_vec();
    for _ in 0..rng.gen_range(1..=3) {
        let at = rng.gen_range(0..out.len());
        out.insert(at, Instruction::new("nop", vec![]));
    }
    out
}

pub fn transform(f: &[Instruction], kind: Transform, rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    match kind {
        Transform::RenameRegisters => rename(f, rng),
        Transform::Reorder => reorder(f, rng),
        Transform::StrengthReduce => strength_reduce(f, rng),
        Transform::InsertNops => insert_nops(f, rng),
    }
}

/// A variant: each transform applied independently with probability 1/2,
/// renaming always included so variants never share register names.
fn variant(f: &[Instruction], rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    let mut v = f.to_vec();
    for kind in Transform::ALL {
        if kind == Transform::RenameRegisters || rng.gen_bool(0.5) {
            v = transform(&v, kind, rng);
        }
    }
    v
}

/// Groups of semantically equivalent functions.
#[derive(Clone, Debug)]
pub struct BcsdCorpus {
    pub groups: Vec<Vec<Vec<Instruction>>>,
}

impl BcsdCorpus {
    /// `functions` groups of `variants` members each (the first is the
    /// untransformed original).
    pub fn generate(functions: usize, variants: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..functions)
            .map(|_| {
                let f = random_function(&mut rng);
                let mut g = vec![f.clone()];
                while g.len() < variants {
                    g.push(variant(&f, &mut rng));
                }
                g
            })
            .collect();
        BcsdCorpus { groups }
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.groups.iter().flatten().flatten()
    }

    pub fn normalized(&self) -> Vec<Instruction> {
        self.instructions().map(normalize).collect()
    }

    pub fn encode(&self, vocab: &Vocabulary, table: &SemanticTable) -> Vec<Vec<Vec<EncodedToken>>> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|f| vocab.encode_instructions(&f.iter().map(normalize).collect::<Vec<_>>(), table)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{interpret, Program};

    fn listing(f: &[Instruction]) -> String {
        // Give every referenced label a home at the end so the listing runs.
        let mut s: String = f.iter().map(|i| format!("{i}\n")).collect();
        s.push_str("helper:\nret\n");
        for i in 1..=16 {
            s.push_str(&format!(".L{i}:\nnop\n"));
        }
        s
    }

    #[test]
    fn deterministic() {
        let a = BcsdCorpus::generate(5, 3, 9);
        let b = BcsdCorpus::generate(5, 3, 9);
        assert_eq!(a.groups, b.groups);
    }

    #[test]
    fn strength_reduction_swaps_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = vec![Instruction::new("imul", vec![gp("rax"), Operand::Imm(Some(2))])];
        let mut seen_shl = false;
        for _ in 0..10 {
            let g = transform(&f, Transform::StrengthReduce, &mut rng);
            seen_shl |= g[0].mnemonic == "shl";
        }
        assert!(seen_shl);
    }

    #[test]
    fn rename_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = vec![Instruction::new("add", vec![gp("rax"), gp("rbx")]), Instruction::new("sub", vec![gp("rbx"), gp("rax")])];
        let g = rename(&f, &mut rng);
        assert_eq!(g[0].operands[0], g[1].operands[1]);
        assert_eq!(g[0].operands[1], g[1].operands[0]);
        assert_ne!(g[0].operands[0], g[0].operands[1]);
    }

    #[test]
    fn reorder_preserves_control_flow() {
        // Swaps never cross a compare/branch pair, so the dynamic path
        // length of memory-free functions is unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        for _ in 0..200 {
            let f: Vec<Instruction> = random_function(&mut rng)
                .into_iter()
                .filter(|i| {
                    !i.operands.iter().any(|o| matches!(o, Operand::Mem(_)))
                        && !matches!(i.mnemonic.as_str(), "push" | "pop" | "call")
                })
                .collect();
            let g = reorder(&f, &mut rng);
            if g == f {
                continue;
            }
            let run = |f: &[Instruction]| {
                let p = Program::parse("f", &listing(f)).unwrap();
                interpret(&p, 0, 10_000).unwrap().len()
            };
            assert_eq!(run(&f), run(&g));
            checked += 1;
        }
        assert!(checked > 10);
    }
}
