use super::{
    tokenize_with, AccessType, AsmError, FlagEffect, InstrType, Instruction, OperandType, RegisterClass, SemanticTable,
    TokenRecord,
};
use std::collections::BTreeSet;

pub const DIMS: usize = 6;
pub const DIM_NAMES: [&str; DIMS] = ["asm_token", "instr_type", "operand_type", "register_class", "access_type", "flag_effect"];

/// Reserved dimension-1 tokens, ids `0..SPECIALS.len()`.
pub const SPECIALS: &[&str] = &["PAD", "UNK", "BOS", "IMM", "MEM", "LABEL"];
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

pub type EncodedToken = [u32; DIMS];

/// Per-dimension token ↔ id bijections. Ids are positions in each list:
/// dimension 1 is the specials followed by the sorted corpus tokens; the
/// categorical dimensions are `PAD` followed by their enum members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    dims: [Vec<String>; DIMS],
}

fn enum_dim<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str) -> Vec<String> {
    std::iter::once("PAD".to_string()).chain(all.iter().map(|&v| name(v).to_string())).collect()
}

impl Vocabulary {
    fn with_asm_tokens(asm: Vec<String>) -> Self {
        Vocabulary {
            dims: [
                asm,
                enum_dim(InstrType::ALL, InstrType::name),
                enum_dim(OperandType::ALL, OperandType::name),
                enum_dim(RegisterClass::ALL, RegisterClass::name),
                enum_dim(AccessType::ALL, AccessType::name),
                enum_dim(FlagEffect::ALL, FlagEffect::name),
            ],
        }
    }

    /// Builds over already-normalized instructions. Deterministic: the same
    /// corpus always yields the same ids regardless of order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a Instruction>, table: &SemanticTable) -> Self {
        let mut seen = BTreeSet::new();
        for ins in corpus {
            for t in tokenize_with(ins, table) {
                if !SPECIALS.contains(&t.asm.as_str()) {
                    seen.insert(t.asm);
                }
            }
        }
        let asm = SPECIALS.iter().map(|s| s.to_string()).chain(seen).collect();
        Self::with_asm_tokens(asm)
    }

    pub fn dim_size(&self, dim: usize) -> usize {
        self.dims[dim].len()
    }

    pub fn sizes(&self) -> [usize; DIMS] {
        std::array::from_fn(|d| self.dims[d].len())
    }

    pub fn tokens(&self, dim: usize) -> &[String] {
        &self.dims[dim]
    }

    pub fn asm_id(&self, token: &str) -> u32 {
        // Specials are unsorted; the corpus tail is sorted.
        if let Some(i) = SPECIALS.iter().position(|s| *s == token) {
            return i as u32;
        }
        match self.dims[0][SPECIALS.len()..].binary_search_by(|t| t.as_str().cmp(token)) {
            Ok(i) => (i + SPECIALS.len()) as u32,
            Err(_) => UNK,
        }
    }

    pub fn encode(&self, t: &TokenRecord) -> EncodedToken {
        [
            self.asm_id(&t.asm),
            t.instr_type.index() as u32 + 1,
            t.operand_type.index() as u32 + 1,
            t.register_class.index() as u32 + 1,
            t.access.index() as u32 + 1,
            t.flag_effect.index() as u32 + 1,
        ]
    }

    /// Inverse of [`encode`](Self::encode). `None` for PAD or out-of-range ids.
    pub fn decode(&self, ids: &EncodedToken) -> Option<TokenRecord> {
        let asm = self.dims[0].get(ids[0] as usize)?.clone();
        let pick = |d: usize| (ids[d] as usize).checked_sub(1);
        Some(TokenRecord {
            asm,
            instr_type: *InstrType::ALL.get(pick(1)?)?,
            operand_type: *OperandType::ALL.get(pick(2)?)?,
            register_class: *RegisterClass::ALL.get(pick(3)?)?,
            access: *AccessType::ALL.get(pick(4)?)?,
            flag_effect: *FlagEffect::ALL.get(pick(5)?)?,
        })
    }

    pub fn encode_instructions<'a>(
        &self,
        instructions: impl IntoIterator<Item = &'a Instruction>,
        table: &SemanticTable,
    ) -> Vec<EncodedToken> {
        instructions.into_iter().flat_map(|i| tokenize_with(i, table)).map(|t| self.encode(&t)).collect()
    }

    /// Text form: one `[dimension]` header per dimension followed by its
    /// tokens, one per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# sbbv vocabulary v1\n");
        for (name, toks) in DIM_NAMES.iter().zip(&self.dims) {
            s.push_str(&format!("[{name}]\n"));
            for t in toks {
                s.push_str(t);
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, AsmError> {
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.to_string(), Vec::new()));
            } else {
                let (_, toks) = sections.last_mut().ok_or_else(|| AsmError::VocabFormat("token before first section".into()))?;
                toks.push(line.to_string());
            }
        }
        let names: Vec<&str> = sections.iter().map(|(n, _)| n.as_str()).collect();
        if names != DIM_NAMES {
            return Err(AsmError::VocabFormat(format!("expected sections {DIM_NAMES:?}, found {names:?}")));
        }
        let asm = sections[0].1.clone();
        if asm.len() < SPECIALS.len() || asm[..SPECIALS.len()] != *SPECIALS {
            return Err(AsmError::VocabFormat("asm_token must start with the special tokens".into()));
        }
        if asm[SPECIALS.len()..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(AsmError::VocabFormat("asm_token corpus tokens must be sorted and unique".into()));
        }
        let v = Self::with_asm_tokens(asm);
        for (d, (_, toks)) in sections.iter().enumerate().skip(1) {
            if *toks != v.dims[d] {
                return Err(AsmError::VocabFormat(format!("dimension {} does not match this build", DIM_NAMES[d])));
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asmnorm::{normalize, parse_listing};

    fn corpus(text: &str) -> Vec<Instruction> {
        parse_listing(text).unwrap().iter().map(normalize).collect()
    }

    #[test]
    fn nop_corpus_vocab() {
        let v = Vocabulary::build(&corpus("nop"), SemanticTable::builtin());
        let expected: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(["nop".to_string()]).collect();
        assert_eq!(v.tokens(0), expected.as_slice());
    }

    #[test]
    fn encode_decode_roundtrip_and_no_unk() {
        let c = corpus("mov rax, [rsp+8]\nadd rbx, 3\ncmp rax, rbx\njne L1\npush rbp\nret");
        let table = SemanticTable::builtin();
        let v = Vocabulary::build(&c, table);
        for ins in &c {
            for t in tokenize_with(ins, table) {
                let ids = v.encode(&t);
                assert_ne!(ids[0], UNK, "OOV on training corpus: {}", t.asm);
                assert_eq!(v.decode(&ids).unwrap(), t);
            }
        }
    }

    #[test]
    fn deterministic_across_orders() {
        let table = SemanticTable::builtin();
        let a = corpus("mov rax, 1\nxor rcx, rdx\nret");
        let mut b = a.clone();
        b.reverse();
        assert_eq!(Vocabulary::build(&a, table), Vocabulary::build(&b, table));
    }

    #[test]
    fn unseen_token_maps_to_unk() {
        let table = SemanticTable::builtin();
        let v = Vocabulary::build(&corpus("nop"), table);
        let toks = tokenize_with(&corpus("inc r9")[0], table);
        assert_eq!(v.encode(&toks[0])[0], UNK);
        assert_eq!(v.encode(&toks[1])[0], UNK);
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocabulary::build(&corpus("mov rax, 1\nlea rdi, [rip+4]\ncall f"), SemanticTable::builtin());
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("[asm_token]\nPAD\n").is_err());
    }
}
