//! Rule-based x86-64 instruction encoding.
//!
//! Every instruction maps to a fixed 439-dimensional binary vector built from
//! its seven components, in this order:
//!
//! ```text
//! option   [  0,   5)  presence bits: prefix, modrm, sib, disp, imm
//! prefix   [  5,  15)  7-way one-hot ES segment, then osz, asz, lock bits
//! opcode   [ 15, 271)  256-way one-hot
//! modrm    [271, 291)  one-hots of mod(4) | reg(8) | rm(8)
//! sib      [291, 311)  one-hots of scale(4) | index(8) | base(8)
//! disp     [311, 375)  64-bit pattern, least significant bit first
//! imm      [375, 439)  64-bit pattern, least significant bit first
//! ```
//!
//! Absent optional components leave their segment zeroed and clear their
//! presence bit. Node vectors aggregate the per-instruction vectors by
//! elementwise mean or max.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INSTR_DIM: usize = 439;

pub const OPTION_OFFSET: usize = 0;
pub const PREFIX_OFFSET: usize = 5;
pub const OPCODE_OFFSET: usize = 15;
pub const MODRM_OFFSET: usize = 271;
pub const SIB_OFFSET: usize = 291;
pub const DISP_OFFSET: usize = 311;
pub const IMM_OFFSET: usize = 375;

const ES_VALUES: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prefix {
    /// Extra-segment register selector, 0..=6.
    pub es: u32,
    /// Operand-size override.
    pub osz: u32,
    /// Address-size override.
    pub asz: u32,
    pub lock: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModRm {
    #[serde(rename = "mod")]
    pub mode: u32,
    pub reg: u32,
    pub rm: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sib {
    pub scale: u32,
    pub index: u32,
    pub base: u32,
}

/// Structured components of one instruction. `None` means the component is
/// absent from the instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionFields {
    pub opcode: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Prefix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modrm: Option<ModRm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sib: Option<Sib>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imm: Option<u64>,
}

impl InstructionFields {
    pub fn opcode(opcode: u32) -> Self {
        InstructionFields {
            opcode,
            ..Default::default()
        }
    }

    /// Presence flags in option-segment order.
    pub fn present(&self) -> [bool; 5] {
        [
            self.prefix.is_some(),
            self.modrm.is_some(),
            self.sib.is_some(),
            self.disp.is_some(),
            self.imm.is_some(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        check("opcode", self.opcode, 255)?;
        if let Some(p) = &self.prefix {
            check("prefix.es", p.es, ES_VALUES - 1)?;
            check("prefix.osz", p.osz, 1)?;
            check("prefix.asz", p.asz, 1)?;
            check("prefix.lock", p.lock, 1)?;
        }
        if let Some(m) = &self.modrm {
            check("modrm.mod", m.mode, 3)?;
            check("modrm.reg", m.reg, 7)?;
            check("modrm.rm", m.rm, 7)?;
        }
        if let Some(s) = &self.sib {
            check("sib.scale", s.scale, 3)?;
            check("sib.index", s.index, 7)?;
            check("sib.base", s.base, 7)?;
        }
        Ok(())
    }
}

fn check(field: &'static str, value: u32, max: u32) -> Result<()> {
    if value > max {
        return Err(Error::Encoding {
            field,
            value: u64::from(value),
            max: u64::from(max),
        });
    }
    Ok(())
}

/// A 439-dimensional instruction or node vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrVector(Vec<f64>);

impl InstrVector {
    pub fn zeros() -> Self {
        InstrVector(vec![0.0; INSTR_DIM])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != INSTR_DIM {
            return Err(Error::validation(format!(
                "instruction vector has length {}, expected {INSTR_DIM}",
                values.len()
            )));
        }
        Ok(InstrVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Indices of nonzero entries.
    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

fn write_bits(out: &mut [f64], offset: usize, value: u64) {
    for bit in 0..64 {
        if (value >> bit) & 1 == 1 {
            out[offset + bit] = 1.0;
        }
    }
}

pub fn encode_instruction(f: &InstructionFields) -> Result<InstrVector> {
    f.validate()?;
    let mut v = vec![0.0; INSTR_DIM];

    for (i, present) in f.present().iter().enumerate() {
        if *present {
            v[OPTION_OFFSET + i] = 1.0;
        }
    }
    if let Some(p) = &f.prefix {
        v[PREFIX_OFFSET + p.es as usize] = 1.0;
        let bits = PREFIX_OFFSET + ES_VALUES as usize;
        v[bits] = f64::from(p.osz);
        v[bits + 1] = f64::from(p.asz);
        v[bits + 2] = f64::from(p.lock);
    }
    v[OPCODE_OFFSET + f.opcode as usize] = 1.0;
    if let Some(m) = &f.modrm {
        v[MODRM_OFFSET + m.mode as usize] = 1.0;
        v[MODRM_OFFSET + 4 + m.reg as usize] = 1.0;
        v[MODRM_OFFSET + 12 + m.rm as usize] = 1.0;
    }
    if let Some(s) = &f.sib {
        v[SIB_OFFSET + s.scale as usize] = 1.0;
        v[SIB_OFFSET + 4 + s.index as usize] = 1.0;
        v[SIB_OFFSET + 12 + s.base as usize] = 1.0;
    }
    if let Some(d) = f.disp {
        write_bits(&mut v, DISP_OFFSET, d);
    }
    if let Some(imm) = f.imm {
        write_bits(&mut v, IMM_OFFSET, imm);
    }
    Ok(InstrVector(v))
}

/// Aggregate the encodings of a basic block's instructions. An empty block
/// encodes as the zero vector.
pub fn encode_node(instrs: &[InstructionFields], mode: Aggregation) -> Result<InstrVector> {
    let mut acc = vec![0.0; INSTR_DIM];
    if instrs.is_empty() {
        return Ok(InstrVector(acc));
    }
    for f in instrs {
        let e = encode_instruction(f)?;
        for (a, x) in acc.iter_mut().zip(e.as_slice()) {
            match mode {
                Aggregation::Mean => *a += x,
                Aggregation::Max => *a = a.max(*x),
            }
        }
    }
    if mode == Aggregation::Mean {
        let n = instrs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(InstrVector(acc))
}
