use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimization group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Classifiers.
    Theta,
    /// Mutual-information estimator.
    Phi,
    /// View estimators.
    Omega,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Theta, Group::Phi, Group::Omega];

    fn code(self) -> u8 {
        match self {
            Group::Theta => 0,
            Group::Phi => 1,
            Group::Omega => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Group::Theta),
            1 => Ok(Group::Phi),
            2 => Ok(Group::Omega),
            _ => Err(Error::Validation(format!("unknown group code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: Group,
    pub value: Tensor,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another tape value.
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: Group) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |(_, p)| p.group == group).map(|(k, _)| k.as_str())
    }

    /// Records every parameter on the tape; those in `trainable` require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        let vars = self.entries.iter().map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), trainable.contains(&p.group)))).collect();
        Bound { vars }
    }

    /// Gradients of every parameter in `group` after a backward pass. Parameters
    /// the loss does not reach get a zero gradient.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound, group: Group) -> Grads {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(k, p)| {
                let g = tape.grad(bound.get(k)).cloned().unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn group_norm(&self, group: Group) -> f64 {
        self.entries.values().filter(|p| p.group == group).map(|p| p.value.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Binary checkpoint: magic, count, then per entry the name, group code,
    /// shape and little-endian `f64` data.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.group.code()])?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Validation("not a cogsl checkpoint".into()));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Validation(e.to_string()))?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            set.insert(name, Group::from_code(code[0])?, Tensor::new(rows, cols, data)?)?;
        }
        Ok(set)
    }
}

const MAGIC: &[u8; 8] = b"COGSLCK1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
