use super::{AccessType, FlagEffect, InstrType, Instruction, Operand, OperandType, RegisterClass, SemanticTable};

/// One token with all six categorical dimensions populated.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenRecord {
    pub asm: String,
    pub instr_type: InstrType,
    pub operand_type: OperandType,
    pub register_class: RegisterClass,
    pub access: AccessType,
    pub flag_effect: FlagEffect,
}

/// Dimension-1 text of an operand token.
fn operand_token(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => r.name.to_string(),
        Operand::Imm(_) => "IMM".into(),
        Operand::Mem(_) => "MEM".into(),
        Operand::Label(_) => "LABEL".into(),
    }
}

/// Tokenizes with the builtin semantic table.
pub fn tokenize(ins: &Instruction) -> Vec<TokenRecord> {
    tokenize_with(ins, SemanticTable::builtin())
}

/// One mnemonic token followed by one token per operand. Memory operands are a
/// single `MEM` token carrying the base register's class.
pub fn tokenize_with(ins: &Instruction, table: &SemanticTable) -> Vec<TokenRecord> {
    let info = table.lookup(&ins.mnemonic);
    let mut out = Vec::with_capacity(1 + ins.operands.len());
    out.push(TokenRecord {
        asm: ins.mnemonic.clone(),
        instr_type: info.instr_type,
        operand_type: OperandType::None,
        register_class: RegisterClass::None,
        access: AccessType::None,
        flag_effect: info.flag_effect,
    });
    for (pos, op) in ins.operands.iter().enumerate() {
        out.push(TokenRecord {
            asm: operand_token(op),
            instr_type: info.instr_type,
            operand_type: op.kind(),
            register_class: op.register_class(),
            access: info.access_at(pos),
            flag_effect: FlagEffect::None,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asmnorm::{normalize, parse_instruction};

    fn tok(text: &str) -> Vec<TokenRecord> {
        tokenize(&normalize(&parse_instruction(text, 1).unwrap().unwrap()))
    }

    fn rec(asm: &str, it: InstrType, ot: OperandType, rc: RegisterClass, ac: AccessType, fe: FlagEffect) -> TokenRecord {
        TokenRecord { asm: asm.into(), instr_type: it, operand_type: ot, register_class: rc, access: ac, flag_effect: fe }
    }

    #[test]
    fn memory_operand_is_single_token_with_base_class() {
        use InstrType::DataMove;
        let toks = tok("mov rax, [rsp+IMM]");
        assert_eq!(
            toks,
            vec![
                rec("mov", DataMove, OperandType::None, RegisterClass::None, AccessType::None, FlagEffect::None),
                rec("rax", DataMove, OperandType::Register, RegisterClass::Gp64, AccessType::Write, FlagEffect::None),
                rec("MEM", DataMove, OperandType::Memory, RegisterClass::StackPtr, AccessType::Read, FlagEffect::None),
            ]
        );
    }

    #[test]
    fn zero_operand_instruction() {
        assert_eq!(tok("nop").len(), 1);
        assert_eq!(tok("ret").len(), 1);
    }

    #[test]
    fn compare_sets_flags_and_reads_both() {
        let toks = tok("cmp rax, rbx");
        assert_eq!(toks[0].flag_effect, FlagEffect::SetsFlags);
        assert_eq!(toks[0].instr_type, InstrType::Compare);
        assert!(toks[1..].iter().all(|t| t.access == AccessType::Read));
    }

    #[test]
    fn store_marks_memory_written() {
        let toks = tok("mov [rbp-8], rcx");
        assert_eq!(toks[1].asm, "MEM");
        assert_eq!(toks[1].access, AccessType::Write);
        assert_eq!(toks[1].register_class, RegisterClass::BasePtr);
    }

    #[test]
    fn immediate_token_has_no_register_class() {
        let toks = tok("add rbx, 7");
        assert_eq!(toks[2].asm, "IMM");
        assert_eq!(toks[2].register_class, RegisterClass::None);
        assert_eq!(toks[2].operand_type, OperandType::Immediate);
    }
}
