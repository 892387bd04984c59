//! Deterministic dialect interpreter over a flat 1 MiB memory.

use super::program::Program;
use super::OracleError;
use crate::asmnorm::{Instruction, MemRef, Operand, Register};
use crate::blockstore::{format_trace_line, Segmenter, SegmentedTrace, TraceLine};

pub const MEM_SIZE: u64 = 1 << 20;
const STACK_TOP: u64 = MEM_SIZE - 64;
const SLOTS: usize = 18;

/// Cost category of an executed instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstrClass {
    Alu,
    Mul,
    Move,
    Branch,
    CallRet,
    Stack,
    Nop,
}

impl InstrClass {
    pub fn of(mnemonic: &str) -> Self {
        match mnemonic {
            "add" | "sub" | "xor" | "and" | "or" | "shl" | "shr" | "inc" | "dec" | "cmp" | "test" => InstrClass::Alu,
            "imul" | "mul" => InstrClass::Mul,
            "mov" | "lea" => InstrClass::Move,
            "jmp" | "je" | "jne" | "jl" | "jge" => InstrClass::Branch,
            "call" | "ret" => InstrClass::CallRet,
            "push" | "pop" => InstrClass::Stack,
            _ => InstrClass::Nop,
        }
    }
}

/// One executed instruction as seen by the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecEvent {
    pub index: u32,
    pub class: InstrClass,
    /// Reduced data address touched, if any.
    pub mem: Option<u64>,
    /// Outcome of a conditional branch.
    pub taken: Option<bool>,
}

#[derive(Clone, Debug, Default)]
struct Flags {
    zf: bool,
    sf: bool,
    of: bool,
}

struct Machine<'p> {
    prog: &'p Program,
    regs: [u64; SLOTS],
    flags: Flags,
    mem: Vec<u8>,
}

fn reduce(addr: u64) -> u64 {
    addr % MEM_SIZE
}

impl Machine<'_> {
    fn read_reg(&self, r: Register) -> u64 {
        let v = self.regs[r.slot as usize];
        if r.wide {
            v
        } else {
            v & 0xffff_ffff
        }
    }

    fn write_reg(&mut self, r: Register, v: u64) {
        self.regs[r.slot as usize] = if r.wide { v } else { v & 0xffff_ffff };
    }

    fn ea(&self, m: &MemRef) -> u64 {
        reduce(self.read_reg(m.base).wrapping_add(m.disp.unwrap_or(0) as u64))
    }

    fn load(&self, addr: u64) -> u64 {
        let mut b = [0u8; 8];
        for (i, x) in b.iter_mut().enumerate() {
            *x = self.mem[reduce(addr + i as u64) as usize];
        }
        u64::from_le_bytes(b)
    }

    fn store(&mut self, addr: u64, v: u64) {
        for (i, x) in v.to_le_bytes().iter().enumerate() {
            self.mem[reduce(addr + i as u64) as usize] = *x;
        }
    }

    fn read(&self, op: &Operand, touched: &mut Option<u64>) -> Result<u64, OracleError> {
        Ok(match op {
            Operand::Reg(r) => self.read_reg(*r),
            Operand::Imm(Some(v)) => *v as u64,
            Operand::Mem(m) => {
                let a = self.ea(m);
                *touched = Some(a);
                self.load(a)
            }
            other => return Err(OracleError::InvalidOperands(format!("cannot read `{other}`"))),
        })
    }

    fn write(&mut self, op: &Operand, v: u64, touched: &mut Option<u64>) -> Result<(), OracleError> {
        match op {
            Operand::Reg(r) => self.write_reg(*r, v),
            Operand::Mem(m) => {
                let a = self.ea(m);
                *touched = Some(a);
                self.store(a, v);
            }
            other => return Err(OracleError::InvalidOperands(format!("cannot write `{other}`"))),
        }
        Ok(())
    }

    fn set_flags(&mut self, result: u64, overflow: bool) {
        self.flags.zf = result == 0;
        self.flags.sf = (result as i64) < 0;
        self.flags.of = overflow;
    }

    fn push(&mut self, v: u64) -> u64 {
        let sp = self.regs[14].wrapping_sub(8);
        self.regs[14] = sp;
        let a = reduce(sp);
        self.store(a, v);
        a
    }

    fn pop(&mut self) -> (u64, u64) {
        let a = reduce(self.regs[14]);
        let v = self.load(a);
        self.regs[14] = self.regs[14].wrapping_add(8);
        (v, a)
    }

    fn arity(ins: &Instruction, n: usize) -> Result<(), OracleError> {
        if ins.operands.len() != n {
            return Err(OracleError::InvalidOperands(format!("`{ins}` expects {n} operand(s)")));
        }
        if ins.operands.iter().filter(|o| matches!(o, Operand::Mem(_))).count() > 1 {
            return Err(OracleError::InvalidOperands(format!("`{ins}` has two memory operands")));
        }
        Ok(())
    }

    /// Executes instruction `pc`; returns the event and the next pc (`None` halts).
    fn step(&mut self, pc: usize) -> Result<(ExecEvent, Option<usize>), OracleError> {
        let ins = &self.prog.instructions[pc];
        let ops = &ins.operands;
        let mut mem = None;
        let mut taken = None;
        let mut next = Some(pc + 1);
        let m = ins.mnemonic.as_str();
        match m {
            "mov" => {
                Self::arity(ins, 2)?;
                let v = self.read(&ops[1], &mut mem)?;
                self.write(&ops[0], v, &mut mem)?;
            }
            "lea" => {
                Self::arity(ins, 2)?;
                let Operand::Mem(mr) = &ops[1] else {
                    return Err(OracleError::InvalidOperands(format!("`{ins}` needs a memory source")));
                };
                let a = self.read_reg(mr.base).wrapping_add(mr.disp.unwrap_or(0) as u64);
                self.write(&ops[0], a, &mut mem)?;
            }
            "add" | "sub" | "imul" | "xor" | "and" | "or" | "shl" | "shr" | "cmp" | "test" => {
                Self::arity(ins, 2)?;
                let a = self.read(&ops[0], &mut mem)?;
                let b = self.read(&ops[1], &mut mem)?;
                let (r, of) = match m {
                    "add" => {
                        let (r, o) = (a as i64).overflowing_add(b as i64);
                        (r as u64, o)
                    }
                    "sub" | "cmp" => {
                        let (r, o) = (a as i64).overflowing_sub(b as i64);
                        (r as u64, o)
                    }
                    "imul" => {
                        let (r, o) = (a as i64).overflowing_mul(b as i64);
                        (r as u64, o)
                    }
                    "xor" => (a ^ b, false),
                    "and" | "test" => (a & b, false),
                    "or" => (a | b, false),
                    "shl" => (a.wrapping_shl((b & 63) as u32), false),
                    _ => (a.wrapping_shr((b & 63) as u32), false),
                };
                self.set_flags(r, of);
                if m != "cmp" && m != "test" {
                    self.write(&ops[0], r, &mut mem)?;
                }
            }
            "inc" | "dec" => {
                Self::arity(ins, 1)?;
                let a = self.read(&ops[0], &mut mem)?;
                let (r, o) = if m == "inc" { (a as i64).overflowing_add(1) } else { (a as i64).overflowing_sub(1) };
                self.set_flags(r as u64, o);
                self.write(&ops[0], r as u64, &mut mem)?;
            }
            "mul" => {
                Self::arity(ins, 1)?;
                let b = self.read(&ops[0], &mut mem)?;
                let wide = (self.regs[0] as u128) * (b as u128);
                self.regs[0] = wide as u64;
                self.regs[3] = (wide >> 64) as u64;
                self.set_flags(self.regs[0], self.regs[3] != 0);
            }
            "jmp" => {
                Self::arity(ins, 1)?;
                next = Some(self.prog.target(&ops[0])?);
            }
            "je" | "jne" | "jl" | "jge" => {
                Self::arity(ins, 1)?;
                let f = &self.flags;
                let t = match m {
                    "je" => f.zf,
                    "jne" => !f.zf,
                    "jl" => f.sf != f.of,
                    _ => f.sf == f.of,
                };
                taken = Some(t);
                if t {
                    next = Some(self.prog.target(&ops[0])?);
                }
            }
            "call" => {
                Self::arity(ins, 1)?;
                let target = self.prog.target(&ops[0])?;
                mem = Some(self.push(pc as u64 + 1));
                next = Some(target);
            }
            "ret" => {
                if reduce(self.regs[14]) >= STACK_TOP {
                    next = None;
                } else {
                    let (ret, a) = self.pop();
                    mem = Some(a);
                    next = Some(ret as usize);
                }
            }
            "push" => {
                Self::arity(ins, 1)?;
                let v = self.read(&ops[0], &mut mem)?;
                mem = Some(self.push(v));
            }
            "pop" => {
                Self::arity(ins, 1)?;
                let (v, a) = self.pop();
                mem = Some(a);
                self.write(&ops[0], v, &mut None)?;
            }
            _ => {}
        }
        let event = ExecEvent { index: pc as u32, class: InstrClass::of(m), mem, taken };
        Ok((event, next.filter(|&n| n < self.prog.instructions.len())))
    }
}

/// Runs `prog` from instruction 0. `input_seed` initializes `rdi`, so the same
/// program text can be driven with different inputs. Fails with
/// [`OracleError::Runaway`] past `max_instructions`.
pub fn interpret(prog: &Program, input_seed: u64, max_instructions: usize) -> Result<Vec<ExecEvent>, OracleError> {
    let mut m = Machine { prog, regs: [0; SLOTS], flags: Flags::default(), mem: vec![0; MEM_SIZE as usize] };
    m.regs[14] = STACK_TOP;
    m.regs[15] = STACK_TOP;
    m.regs[5] = input_seed;
    let mut events = Vec::new();
    let mut pc = (!prog.instructions.is_empty()).then_some(0);
    while let Some(p) = pc {
        if events.len() >= max_instructions {
            return Err(OracleError::Runaway(max_instructions));
        }
        let (ev, next) = m.step(p)?;
        events.push(ev);
        pc = next;
    }
    Ok(events)
}

/// Renders events in the trace file format.
pub fn render_trace(prog: &Program, events: &[ExecEvent]) -> String {
    let mut s = String::with_capacity(events.len() * 24);
    for e in events {
        s.push_str(&format_trace_line(Program::pc_of(e.index as usize), &prog.instructions[e.index as usize].text()));
        s.push('\n');
    }
    s
}

pub fn trace_lines(prog: &Program, events: &[ExecEvent]) -> Vec<TraceLine> {
    events
        .iter()
        .map(|e| TraceLine { pc: Program::pc_of(e.index as usize), instruction: prog.instructions[e.index as usize].clone() })
        .collect()
}

/// Segments straight from events, equivalent to segmenting the rendered trace.
pub fn segment_events(prog: &Program, events: &[ExecEvent]) -> SegmentedTrace {
    let mut seg = Segmenter::new();
    let mut out = SegmentedTrace::default();
    let record = |items: Vec<_>, out: &mut SegmentedTrace| {
        for (exec, block) in items {
            out.execs.push(exec);
            if let Some(b) = block {
                out.blocks.push(b);
            }
        }
    };
    for e in events {
        let items = seg.push(Program::pc_of(e.index as usize), &prog.instructions[e.index as usize]);
        record(items, &mut out);
    }
    record(seg.flush().into_iter().collect(), &mut out);
    out
}
