use super::{AsmError, Instruction, MemRef, Operand, Register};

const MAX_OPERANDS: usize = 3;

/// Parses a line-oriented listing. Comments (`;` to end of line) and blank
/// lines are skipped; line numbers in errors are 1-based.
pub fn parse_listing(text: &str) -> Result<Vec<Instruction>, AsmError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(ins) = parse_instruction(line, i + 1)? {
            out.push(ins);
        }
    }
    Ok(out)
}

/// Parses one line. `Ok(None)` for blank or comment-only lines.
pub fn parse_instruction(line: &str, line_no: usize) -> Result<Option<Instruction>, AsmError> {
    let code = line.split(';').next().unwrap_or("").trim();
    if code.is_empty() {
        return Ok(None);
    }
    let (mnemonic, rest) = match code.find(char::is_whitespace) {
        Some(i) => (&code[..i], code[i..].trim()),
        None => (code, ""),
    };
    let malformed = |operand: &str, reason: &str| AsmError::MalformedOperand {
        line: line_no,
        operand: operand.to_string(),
        reason: reason.to_string(),
    };
    let mut depth = 0i32;
    for ch in rest.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            _ => {}
        }
        if !(0..=1).contains(&depth) {
            return Err(malformed(rest, "unbalanced brackets"));
        }
    }
    if depth != 0 {
        return Err(malformed(rest, "unbalanced brackets"));
    }
    let mut operands = Vec::new();
    if !rest.is_empty() {
        for part in rest.split(',') {
            operands.push(parse_operand(part.trim()).map_err(|reason| malformed(part.trim(), &reason))?);
        }
    }
    if operands.len() > MAX_OPERANDS {
        return Err(malformed(rest, "more than three operands"));
    }
    Ok(Some(Instruction { mnemonic: mnemonic.to_ascii_lowercase(), operands, raw_text: line.to_string() }))
}

fn strip_size_prefix(s: &str) -> &str {
    let lower = s.to_ascii_lowercase();
    for p in ["qword ptr", "dword ptr", "word ptr", "byte ptr"] {
        if lower.starts_with(p) {
            return s[p.len()..].trim_start();
        }
    }
    s
}

fn parse_operand(raw: &str) -> Result<Operand, String> {
    if raw.is_empty() {
        return Err("empty operand".into());
    }
    let s = strip_size_prefix(raw);
    if let Some(inner) = s.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or("memory operand must end with `]`")?;
        return parse_memory(inner).map(Operand::Mem);
    }
    if s.contains(']') {
        return Err("unbalanced brackets".into());
    }
    if let Some(r) = Register::lookup(s) {
        return Ok(Operand::Reg(r));
    }
    if s == "IMM" {
        return Ok(Operand::Imm(None));
    }
    if s == "LABEL" {
        return Ok(Operand::Label(None));
    }
    if let Some(v) = parse_int(s) {
        return Ok(Operand::Imm(Some(v)));
    }
    if is_label(s) {
        return Ok(Operand::Label(Some(s.to_string())));
    }
    Err("not a register, immediate, memory reference or label".into())
}

fn parse_memory(inner: &str) -> Result<MemRef, String> {
    let compact: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err("empty memory reference".into());
    }
    if compact.contains('*') {
        return Err("index registers are not supported".into());
    }
    let split = compact.char_indices().skip(1).find(|&(_, c)| c == '+' || c == '-').map(|(i, _)| i);
    let (base_s, disp_s) = match split {
        Some(i) => (&compact[..i], Some(&compact[i..])),
        None => (compact.as_str(), None),
    };
    let base = Register::lookup(base_s).ok_or("memory base must be a register")?;
    let (disp, present) = match disp_s {
        None => (None, false),
        Some(d) => {
            let (neg, body) = (d.starts_with('-'), &d[1..]);
            if body == "IMM" {
                (None, true)
            } else if Register::lookup(body).is_some() {
                return Err("index registers are not supported".into());
            } else {
                let v = parse_int(body).ok_or("displacement must be an immediate")?;
                (Some(if neg { -v } else { v }), true)
            }
        }
    };
    Ok(MemRef { base, disp, displacement_present: present })
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn is_label(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asmnorm::{OperandType, RegisterClass};

    #[test]
    fn parses_register_and_immediate() {
        let ins = parse_instruction("mov rax, 5", 1).unwrap().unwrap();
        assert_eq!(ins.mnemonic, "mov");
        assert_eq!(ins.operands.len(), 2);
        assert_eq!(ins.operands[0].kind(), OperandType::Register);
        assert_eq!(ins.operands[1], Operand::Imm(Some(5)));
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let v = parse_listing("; comment\n\nadd rbx, rax").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].mnemonic, "add");
    }

    #[test]
    fn unbalanced_bracket_is_malformed_at_line() {
        match parse_listing("mov rax, [rsp") {
            Err(AsmError::MalformedOperand { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedOperand, got {other:?}"),
        }
        assert!(matches!(parse_listing("nop\nmov rax, rsp]"), Err(AsmError::MalformedOperand { line: 2, .. })));
    }

    #[test]
    fn empty_operand_is_malformed() {
        assert!(matches!(parse_listing("mov rax,"), Err(AsmError::MalformedOperand { .. })));
    }

    #[test]
    fn index_register_rejected() {
        assert!(parse_listing("mov rax, [rbx+rcx*8]").is_err());
        assert!(parse_listing("mov rax, [rbx+rcx]").is_err());
    }

    #[test]
    fn unknown_mnemonic_still_parses() {
        let v = parse_listing("cpuid").unwrap();
        assert_eq!(v[0].mnemonic, "cpuid");
    }

    #[test]
    fn memory_operand_fields() {
        let ins = parse_instruction("mov rax, qword ptr [rbp - 0x10]", 3).unwrap().unwrap();
        match &ins.operands[1] {
            Operand::Mem(m) => {
                assert_eq!(m.base.class, RegisterClass::BasePtr);
                assert_eq!(m.disp, Some(-16));
                assert!(m.displacement_present);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(ins.to_string(), "mov rax, [rbp-16]");
    }

    #[test]
    fn too_many_operands() {
        assert!(parse_listing("add rax, rbx, rcx, rdx").is_err());
    }
}
