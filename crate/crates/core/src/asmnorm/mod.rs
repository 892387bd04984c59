//! Intel-syntax dialect: parsing, normalization and six-dimensional
//! tokenization.
//!
//! The dialect is a fixed subset of x86-64: general-purpose registers,
//! immediates, `[base±disp]` memory operands and symbolic labels. Index
//! registers are rejected so every memory operand carries exactly one
//! register class.

mod parse;
mod semantics;
mod token;
mod vocab;

pub use parse::{parse_instruction, parse_listing};
pub use semantics::{MnemonicInfo, SemanticTable};
pub use token::{tokenize, tokenize_with, TokenRecord};
pub use vocab::{EncodedToken, Vocabulary, DIMS, DIM_NAMES, PAD, SPECIALS, UNK};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsmError {
    #[error("line {line}: malformed operand `{operand}`: {reason}")]
    MalformedOperand { line: usize, operand: String, reason: String },
    #[error("semantic table line {line}: {reason}")]
    SemanticTable { line: usize, reason: String },
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
}

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($text => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

token_enum!(InstrType {
    Arith => "arith",
    Logic => "logic",
    DataMove => "datamove",
    Control => "control",
    Compare => "compare",
    Stack => "stack",
    Other => "other",
});

token_enum!(OperandType {
    None => "none",
    Register => "register",
    Immediate => "immediate",
    Memory => "memory",
    Label => "label",
});

token_enum!(RegisterClass {
    None => "none",
    Gp64 => "gp64",
    Gp32 => "gp32",
    StackPtr => "stack_ptr",
    BasePtr => "base_ptr",
    InstrPtr => "instr_ptr",
    FlagsReg => "flags_reg",
});

token_enum!(AccessType {
    None => "none",
    Read => "read",
    Write => "write",
    ReadWrite => "readwrite",
});

token_enum!(FlagEffect {
    None => "none",
    SetsFlags => "sets_flags",
    ReadsFlags => "reads_flags",
    SetsAndReads => "sets_and_reads",
});

impl AccessType {
    pub fn reads(self) -> bool {
        matches!(self, AccessType::Read | AccessType::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, AccessType::Write | AccessType::ReadWrite)
    }
}

/// An architectural register. `slot` identifies the underlying storage, so
/// `eax` and `rax` share a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Register {
    pub name: &'static str,
    pub class: RegisterClass,
    pub slot: u8,
    pub wide: bool,
}

const fn reg(name: &'static str, class: RegisterClass, slot: u8, wide: bool) -> Register {
    Register { name, class, slot, wide }
}

pub const REGISTERS: &[Register] = &[
    reg("rax", RegisterClass::Gp64, 0, true),
    reg("rbx", RegisterClass::Gp64, 1, true),
    reg("rcx", RegisterClass::Gp64, 2, true),
    reg("rdx", RegisterClass::Gp64, 3, true),
    reg("rsi", RegisterClass::Gp64, 4, true),
    reg("rdi", RegisterClass::Gp64, 5, true),
    reg("r8", RegisterClass::Gp64, 6, true),
    reg("r9", RegisterClass::Gp64, 7, true),
    reg("r10", RegisterClass::Gp64, 8, true),
    reg("r11", RegisterClass::Gp64, 9, true),
    reg("r12", RegisterClass::Gp64, 10, true),
    reg("r13", RegisterClass::Gp64, 11, true),
    reg("r14", RegisterClass::Gp64, 12, true),
    reg("r15", RegisterClass::Gp64, 13, true),
    reg("eax", RegisterClass::Gp32, 0, false),
    reg("ebx", RegisterClass::Gp32, 1, false),
    reg("ecx", RegisterClass::Gp32, 2, false),
    reg("edx", RegisterClass::Gp32, 3, false),
    reg("esi", RegisterClass::Gp32, 4, false),
    reg("edi", RegisterClass::Gp32, 5, false),
    reg("r8d", RegisterClass::Gp32, 6, false),
    reg("r9d", RegisterClass::Gp32, 7, false),
    reg("r10d", RegisterClass::Gp32, 8, false),
    reg("r11d", RegisterClass::Gp32, 9, false),
    reg("r12d", RegisterClass::Gp32, 10, false),
    reg("r13d", RegisterClass::Gp32, 11, false),
    reg("r14d", RegisterClass::Gp32, 12, false),
    reg("r15d", RegisterClass::Gp32, 13, false),
    reg("rsp", RegisterClass::StackPtr, 14, true),
    reg("esp", RegisterClass::StackPtr, 14, false),
    reg("rbp", RegisterClass::BasePtr, 15, true),
    reg("ebp", RegisterClass::BasePtr, 15, false),
    reg("rip", RegisterClass::InstrPtr, 16, true),
    reg("rflags", RegisterClass::FlagsReg, 17, true),
];

/// The 64-bit general purpose registers, in slot order.
pub const GP64: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
];

impl Register {
    pub fn lookup(name: &str) -> Option<Register> {
        let lower = name.to_ascii_lowercase();
        REGISTERS.iter().copied().find(|r| r.name == lower)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Register,
    /// Literal displacement; `None` once normalized (or when absent).
    pub disp: Option<i64>,
    pub displacement_present: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    /// `None` is the normalized `IMM` token.
    Imm(Option<i64>),
    Mem(MemRef),
    /// `None` is the normalized `LABEL` token.
    Label(Option<String>),
}

impl Operand {
    pub fn kind(&self) -> OperandType {
        match self {
            Operand::Reg(_) => OperandType::Register,
            Operand::Imm(_) => OperandType::Immediate,
            Operand::Mem(_) => OperandType::Memory,
            Operand::Label(_) => OperandType::Label,
        }
    }

    pub fn register_class(&self) -> RegisterClass {
        match self {
            Operand::Reg(r) => r.class,
            Operand::Mem(m) => m.base.class,
            Operand::Imm(_) | Operand::Label(_) => RegisterClass::None,
        }
    }

    pub fn displacement_present(&self) -> bool {
        matches!(self, Operand::Mem(m) if m.displacement_present)
    }

    fn normalized(&self) -> Operand {
        match self {
            Operand::Reg(r) => Operand::Reg(*r),
            Operand::Imm(_) => Operand::Imm(None),
            Operand::Mem(m) => Operand::Mem(MemRef { base: m.base, disp: None, displacement_present: m.displacement_present }),
            Operand::Label(_) => Operand::Label(None),
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(Some(v)) => write!(f, "{v}"),
            Operand::Imm(None) => f.write_str("IMM"),
            Operand::Label(Some(l)) => f.write_str(l),
            Operand::Label(None) => f.write_str("LABEL"),
            Operand::Mem(m) => match (m.displacement_present, m.disp) {
                (false, _) => write!(f, "[{}]", m.base),
                (true, None) => write!(f, "[{}+IMM]", m.base),
                (true, Some(d)) if d < 0 => write!(f, "[{}-{}]", m.base, d.unsigned_abs()),
                (true, Some(d)) => write!(f, "[{}+{}]", m.base, d),
            },
        }
    }
}

/// Equality and hashing ignore `raw_text`, which is provenance only.
#[derive(Clone, Debug)]
pub struct Instruction {
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub raw_text: String,
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.mnemonic == other.mnemonic && self.operands == other.operands
    }
}

impl Eq for Instruction {}

impl std::hash::Hash for Instruction {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.mnemonic.hash(state);
        self.operands.hash(state);
    }
}

impl Instruction {
    pub fn new(mnemonic: &str, operands: Vec<Operand>) -> Self {
        let mut ins = Instruction { mnemonic: mnemonic.to_ascii_lowercase(), operands, raw_text: String::new() };
        ins.raw_text = ins.to_string();
        ins
    }

    /// Canonical text; for a normalized instruction this is the block-identity text.
    pub fn text(&self) -> String {
        self.to_string()
    }

    pub fn is_control_transfer(&self) -> bool {
        matches!(self.mnemonic.as_str(), "jmp" | "je" | "jne" | "jl" | "jge" | "call" | "ret")
    }

    pub fn is_conditional_branch(&self) -> bool {
        matches!(self.mnemonic.as_str(), "je" | "jne" | "jl" | "jge")
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

/// Replaces immediates, displacements and labels with generic tokens.
pub fn normalize(ins: &Instruction) -> Instruction {
    Instruction {
        mnemonic: ins.mnemonic.clone(),
        operands: ins.operands.iter().map(Operand::normalized).collect(),
        raw_text: ins.raw_text.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_replaces_immediates() {
        let ins = parse_instruction("mov rax, 0x4f2a", 1).unwrap().unwrap();
        assert_eq!(normalize(&ins).text(), "mov rax, IMM");
    }

    #[test]
    fn normalize_replaces_labels() {
        let ins = parse_instruction("jmp L3", 1).unwrap().unwrap();
        assert_eq!(normalize(&ins).text(), "jmp LABEL");
    }

    #[test]
    fn normalize_keeps_displacement_flag() {
        let ins = parse_instruction("mov rax, [rsp-16]", 1).unwrap().unwrap();
        let n = normalize(&ins);
        assert_eq!(n.text(), "mov rax, [rsp+IMM]");
        assert!(n.operands[1].displacement_present());
        let plain = normalize(&parse_instruction("mov rax, [rbx]", 1).unwrap().unwrap());
        assert_eq!(plain.text(), "mov rax, [rbx]");
        assert!(!plain.operands[1].displacement_present());
    }

    #[test]
    fn normalized_text_reparses_to_itself() {
        let ins = normalize(&parse_instruction("add qword ptr [rbp+8], 12", 1).unwrap().unwrap());
        let again = parse_instruction(&ins.text(), 1).unwrap().unwrap();
        assert_eq!(normalize(&again).text(), ins.text());
    }

    #[test]
    fn operand_invariants() {
        let imm = Operand::Imm(Some(3));
        assert_eq!(imm.register_class(), RegisterClass::None);
        let mem = parse_instruction("mov rax, [rsp+8]", 1).unwrap().unwrap().operands[1].clone();
        assert_eq!(mem.register_class(), RegisterClass::StackPtr);
    }
}
