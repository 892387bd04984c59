use super::{AccessType, AsmError, FlagEffect, InstrType};
use std::collections::BTreeMap;
use std::sync::OnceLock;

const BUILTIN: &str = include_str!("../../data/semantics.tbl");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnemonicInfo {
    pub instr_type: InstrType,
    pub flag_effect: FlagEffect,
    pub access: Vec<AccessType>,
}

impl MnemonicInfo {
    /// Access of operand `pos`; positions past the table entry read.
    pub fn access_at(&self, pos: usize) -> AccessType {
        self.access.get(pos).copied().unwrap_or(AccessType::Read)
    }
}

/// Mnemonic → semantics, loaded from the key-value table format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticTable {
    entries: BTreeMap<String, MnemonicInfo>,
}

impl SemanticTable {
    pub fn parse(text: &str) -> Result<Self, AsmError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| AsmError::SemanticTable { line: i + 1, reason };
            let code = line.split('#').next().unwrap_or("").trim();
            if code.is_empty() {
                continue;
            }
            let cols: Vec<&str> = code.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", cols.len())));
            }
            let instr_type = InstrType::from_name(cols[1]).ok_or_else(|| err(format!("unknown instr_type `{}`", cols[1])))?;
            let flag_effect =
                FlagEffect::from_name(cols[2]).ok_or_else(|| err(format!("unknown flag_effect `{}`", cols[2])))?;
            let access = if cols[3] == "-" {
                Vec::new()
            } else {
                cols[3]
                    .split(',')
                    .map(|a| AccessType::from_name(a).ok_or_else(|| err(format!("unknown access `{a}`"))))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let mnemonic = cols[0].to_ascii_lowercase();
            if entries.insert(mnemonic.clone(), MnemonicInfo { instr_type, flag_effect, access }).is_some() {
                return Err(err(format!("duplicate mnemonic `{mnemonic}`")));
            }
        }
        Ok(SemanticTable { entries })
    }

    /// The table shipped in `data/semantics.tbl`.
    pub fn builtin() -> &'static SemanticTable {
        static TABLE: OnceLock<SemanticTable> = OnceLock::new();
        TABLE.get_or_init(|| SemanticTable::parse(BUILTIN).expect("builtin semantic table is valid"))
    }

    pub fn builtin_text() -> &'static str {
        BUILTIN
    }

    pub fn lookup(&self, mnemonic: &str) -> MnemonicInfo {
        self.entries.get(mnemonic).cloned().unwrap_or(MnemonicInfo {
            instr_type: InstrType::Other,
            flag_effect: FlagEffect::None,
            access: Vec::new(),
        })
    }

    pub fn contains(&self, mnemonic: &str) -> bool {
        self.entries.contains_key(mnemonic)
    }

    pub fn mnemonics(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
