use super::OracleError;
use crate::asmnorm::{parse_instruction, Instruction, Operand};
use std::collections::HashMap;

/// Code addresses start here; instruction `i` lives at `CODE_BASE + 4i`.
pub const CODE_BASE: u64 = 0x40_0000;

/// A dialect program with resolved labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub name: String,
    pub instructions: Vec<Instruction>,
    pub labels: HashMap<String, usize>,
    /// Listing text the program was parsed from.
    pub text: String,
}

impl Program {
    /// Parses a listing where `name:` lines define labels.
    pub fn parse(name: &str, text: &str) -> Result<Self, OracleError> {
        let mut instructions = Vec::new();
        let mut labels = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let code = line.split(';').next().unwrap_or("").trim();
            if let Some(label) = code.strip_suffix(':') {
                if labels.insert(label.trim().to_string(), instructions.len()).is_some() {
                    return Err(OracleError::DuplicateLabel(label.to_string()));
                }
                continue;
            }
            if let Some(ins) = parse_instruction(line, i + 1)? {
                instructions.push(ins);
            }
        }
        for ins in &instructions {
            for op in &ins.operands {
                if let Operand::Label(Some(l)) = op {
                    if !labels.contains_key(l) {
                        return Err(OracleError::UndefinedLabel(l.clone()));
                    }
                }
            }
        }
        Ok(Program { name: name.to_string(), instructions, labels, text: text.to_string() })
    }

    pub fn pc_of(index: usize) -> u64 {
        CODE_BASE + crate::blockstore::INSTR_BYTES * index as u64
    }

    pub fn target(&self, op: &Operand) -> Result<usize, OracleError> {
        match op {
            Operand::Label(Some(l)) => self.labels.get(l).copied().ok_or_else(|| OracleError::UndefinedLabel(l.clone())),
            other => Err(OracleError::InvalidOperands(format!("branch target must be a label, got `{other}`"))),
        }
    }
}

/// The two-level nested loop in its unoptimized compiled shape: an entry
/// block that jumps to the outer condition, the outer body that jumps to the
/// inner condition, the inner body falling into the inner condition, the
/// outer increment falling into the outer condition, and the exit.
pub fn nested_loop_listing(outer: u32, inner: u32) -> String {
    format!(
        "\
    mov rcx, 0
    jmp outer_cond
outer_body:
    mov rdx, 0
    jmp inner_cond
inner_body:
    add rax, rdx
    inc rdx
inner_cond:
    cmp rdx, {inner}
    jl inner_body
    inc rcx
outer_cond:
    cmp rcx, {outer}
    jl outer_body
    ret
"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_resolve_to_instruction_indices() {
        let p = Program::parse("t", &nested_loop_listing(2, 3)).unwrap();
        assert_eq!(p.labels["outer_body"], 2);
        assert_eq!(p.labels["inner_cond"], 6);
        assert_eq!(p.instructions.len(), 12);
    }

    #[test]
    fn undefined_label_rejected() {
        assert!(matches!(Program::parse("t", "jmp nowhere"), Err(OracleError::UndefinedLabel(_))));
    }
}
