//! Random bit-flip error injection into model parameters.
//!
//! A run's corruption is an explicit [`ErrorMap`]: a sorted list of
//! `(parameter, element, bit)` triples. Maps are drawn by first sampling the
//! flip count `K ~ Binomial(N, ber)` over the `N` unprotected bit positions in
//! the targeted tensors and then choosing `K` distinct positions uniformly.
//! By exchangeability that is the same joint law as an independent
//! `Bernoulli(ber)` draw per bit, at `O(K)` cost instead of `O(N)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Component, ModelGraph};

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("bit position {0} out of range 0..=31")]
    BitPosition(u32),
    #[error("injection config error: {0}")]
    Config(String),
    #[error("error map entry {entry} does not resolve: {reason}")]
    Integrity { entry: usize, reason: String },
    #[error("error map parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const SIGN_MASK: u32 = 0x8000_0000;
pub const EXPONENT_MASK: u32 = 0x7F80_0000;
pub const MANTISSA_MASK: u32 = 0x007F_FFFF;

/// Field of an IEEE-754 single-precision word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatField {
    Sign,
    Exponent,
    Mantissa,
}

impl FloatField {
    pub fn mask(self) -> u32 {
        match self {
            FloatField::Sign => SIGN_MASK,
            FloatField::Exponent => EXPONENT_MASK,
            FloatField::Mantissa => MANTISSA_MASK,
        }
    }
}

impl std::str::FromStr for FloatField {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sign" => Ok(Self::Sign),
            "exponent" => Ok(Self::Exponent),
            "mantissa" => Ok(Self::Mantissa),
            other => Err(format!("unknown float field `{other}`")),
        }
    }
}

/// Protected-bit mask covering the union of `fields`.
pub fn sbp_mask(fields: &[FloatField]) -> u32 {
    fields.iter().fold(0, |m, f| m | f.mask())
}

/// Toggles one bit of a 32-bit word; bit 0 is the mantissa LSB, 31 the sign.
pub fn flip_bit(word: u32, position: u32) -> Result<u32, InjectError> {
    if position > 31 {
        return Err(InjectError::BitPosition(position));
    }
    Ok(word ^ (1u32 << position))
}

pub fn flip_bit_f32(value: f32, position: u32) -> Result<f32, InjectError> {
    flip_bit(value.to_bits(), position).map(f32::from_bits)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    EntireModel,
    Mlp,
    Embedding,
    Named(Vec<String>),
}

impl TargetSelector {
    pub fn label(&self) -> String {
        match self {
            TargetSelector::EntireModel => "entire_model".into(),
            TargetSelector::Mlp => "mlp".into(),
            TargetSelector::Embedding => "embedding".into(),
            TargetSelector::Named(names) => format!("names:{}", names.join(",")),
        }
    }

    /// Indices of the parameters this selector picks, in model order.
    pub fn resolve(&self, model: &ModelGraph) -> Result<Vec<usize>, InjectError> {
        let params = model.parameters();
        let picked: Vec<usize> = match self {
            TargetSelector::EntireModel => (0..params.len()).collect(),
            TargetSelector::Mlp => component_indices(model, Component::Mlp),
            TargetSelector::Embedding => component_indices(model, Component::Embedding),
            TargetSelector::Named(names) => {
                let mut out = Vec::with_capacity(names.len());
                for n in names {
                    let idx = model
                        .find(n)
                        .ok_or_else(|| InjectError::Config(format!("no parameter named `{n}`")))?;
                    if !out.contains(&idx) {
                        out.push(idx);
                    }
                }
                out.sort_unstable();
                out
            }
        };
        if picked.is_empty() {
            return Err(InjectError::Config(format!(
                "target `{}` selects no parameters",
                self.label()
            )));
        }
        Ok(picked)
    }
}

fn component_indices(model: &ModelGraph, c: Component) -> Vec<usize> {
    model
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.component == c)
        .map(|(i, _)| i)
        .collect()
}

impl std::str::FromStr for TargetSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entire_model" => Ok(Self::EntireModel),
            "mlp" => Ok(Self::Mlp),
            "embedding" => Ok(Self::Embedding),
            other => match other.strip_prefix("names:") {
                Some(list) if !list.is_empty() => {
                    Ok(Self::Named(list.split(',').map(str::to_owned).collect()))
                }
                _ => Err(format!("unknown target `{other}`")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub ber: f64,
    pub targets: TargetSelector,
    /// Bits set here are never flipped.
    pub protected_bits: u32,
    pub seed: u64,
}

impl InjectionConfig {
    pub fn new(ber: f64, targets: TargetSelector, seed: u64) -> Self {
        Self {
            ber,
            targets,
            protected_bits: 0,
            seed,
        }
    }

    pub fn with_mask(mut self, mask: u32) -> Self {
        self.protected_bits = mask;
        self
    }

    pub fn validate(&self) -> Result<(), InjectError> {
        if !(0.0..=1.0).contains(&self.ber) {
            return Err(InjectError::Config(format!(
                "ber must lie in [0, 1], got {}",
                self.ber
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ErrorEntry {
    /// Index into [`ErrorMap::param_names`].
    pub param: u32,
    pub element: u32,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    param_names: Vec<String>,
    entries: Vec<ErrorEntry>,
    pub seed: u64,
    pub ber: f64,
    pub mask: u32,
    pub targets: String,
}

impl ErrorMap {
    pub fn empty(cfg: &InjectionConfig) -> Self {
        Self {
            param_names: Vec::new(),
            entries: Vec::new(),
            seed: cfg.seed,
            ber: cfg.ber,
            mask: cfg.protected_bits,
            targets: cfg.targets.label(),
        }
    }

    /// Builds a map from explicit triples (sorted and deduplicated).
    pub fn from_triples<S: AsRef<str>>(
        triples: impl IntoIterator<Item = (S, usize, u8)>,
        seed: u64,
        ber: f64,
        mask: u32,
        targets: String,
    ) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for (name, element, bit) in triples {
            let name = name.as_ref();
            let param = match names.iter().position(|n| n == name) {
                Some(p) => p,
                None => {
                    names.push(name.to_owned());
                    names.len() - 1
                }
            };
            entries.push(ErrorEntry {
                param: param as u32,
                element: element as u32,
                bit,
            });
        }
        let mut map = Self {
            param_names: names,
            entries,
            seed,
            ber,
            mask,
            targets,
        };
        map.canonicalize();
        map
    }

    fn canonicalize(&mut self) {
        // keep referenced names only; order by name, then element, then bit
        let mut used = vec![false; self.param_names.len()];
        for e in &self.entries {
            used[e.param as usize] = true;
        }
        let mut order: Vec<usize> = (0..self.param_names.len()).filter(|&i| used[i]).collect();
        order.sort_by(|a, b| self.param_names[*a].cmp(&self.param_names[*b]));
        let mut remap = vec![0u32; self.param_names.len()];
        for (new, old) in order.iter().enumerate() {
            remap[*old] = new as u32;
        }
        self.param_names = order.iter().map(|&i| self.param_names[i].clone()).collect();
        for e in &mut self.entries {
            e.param = remap[e.param as usize];
        }
        self.entries.sort_unstable();
        self.entries.dedup();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn raw_entries(&self) -> &[ErrorEntry] {
        &self.entries
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, u8)> + '_ {
        self.entries
            .iter()
            .map(|e| (self.param_names[e.param as usize].as_str(), e.element as usize, e.bit))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), InjectError> {
        writeln!(
            w,
            "#errormap seed={} ber={:?} mask=0x{:08x} targets={}",
            self.seed, self.ber, self.mask, self.targets
        )?;
        let mut line = String::new();
        for (name, element, bit) in self.entries() {
            line.clear();
            let _ = writeln!(line, "{name}\t{element}\t{bit}");
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, InjectError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or(InjectError::Parse { line: 1, reason: "empty file".into() })?;
        let perr = |line: usize, reason: String| InjectError::Parse { line, reason };
        let rest = header
            .strip_prefix("#errormap")
            .ok_or_else(|| perr(1, "missing `#errormap` header".into()))?;
        let (mut seed, mut ber, mut mask, mut targets) = (None, None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| perr(1, format!("malformed header field `{field}`")))?;
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| perr(1, format!("seed: {e}")))?),
                "ber" => ber = Some(v.parse::<f64>().map_err(|e| perr(1, format!("ber: {e}")))?),
                "mask" => {
                    let hex = v.trim_start_matches("0x");
                    mask = Some(u32::from_str_radix(hex, 16).map_err(|e| perr(1, format!("mask: {e}")))?)
                }
                "targets" => targets = Some(v.to_owned()),
                other => return Err(perr(1, format!("unknown header field `{other}`"))),
            }
        }
        let mut triples = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(name), Some(elem), Some(bit), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(perr(lineno, "expected `name<TAB>element<TAB>bit`".into()));
            };
            let element: u32 = elem
                .parse()
                .map_err(|e| perr(lineno, format!("element index: {e}")))?;
            let bit: u8 = bit.parse().map_err(|e| perr(lineno, format!("bit: {e}")))?;
            if bit > 31 {
                return Err(perr(lineno, format!("bit {bit} out of range")));
            }
            triples.push((name.to_owned(), element as usize, bit));
        }
        Ok(Self::from_triples(
            triples,
            seed.ok_or_else(|| perr(1, "header lacks seed".into()))?,
            ber.ok_or_else(|| perr(1, "header lacks ber".into()))?,
            mask.ok_or_else(|| perr(1, "header lacks mask".into()))?,
            targets.unwrap_or_else(|| "unknown".into()),
        ))
    }
}

/// Draws the error map for one injection run.
pub fn build_error_map(model: &ModelGraph, cfg: &InjectionConfig) -> Result<ErrorMap, InjectError> {
    cfg.validate()?;
    let picked = cfg.targets.resolve(model)?;
    let unprotected: Vec<u8> = (0..32u8).filter(|b| cfg.protected_bits & (1 << b) == 0).collect();
    let bits_per_elem = unprotected.len() as u64;

    // Cumulative element offsets over the targeted tensors.
    let params = model.parameters();
    let mut offsets = Vec::with_capacity(picked.len() + 1);
    let mut total_elems = 0u64;
    offsets.push(0u64);
    for &p in &picked {
        total_elems += params[p].tensor.len() as u64;
        offsets.push(total_elems);
    }
    let n_bits = total_elems * bits_per_elem;

    let mut map = ErrorMap::empty(cfg);
    if n_bits == 0 || cfg.ber == 0.0 {
        return Ok(map);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = Binomial::new(n_bits, cfg.ber)
        .map_err(|e| InjectError::Config(e.to_string()))?
        .sample(&mut rng);
    let n_bits_usize = usize::try_from(n_bits)
        .map_err(|_| InjectError::Config("target too large for this platform".into()))?;
    let positions: Vec<u64> = if k == n_bits {
        (0..n_bits).collect()
    } else {
        rand::seq::index::sample(&mut rng, n_bits_usize, k as usize)
            .into_iter()
            .map(|p| p as u64)
            .collect()
    };

    map.param_names = picked.iter().map(|&p| params[p].name.clone()).collect();
    map.entries = positions
        .into_iter()
        .map(|pos| {
            let elem = pos / bits_per_elem;
            let bit = unprotected[(pos % bits_per_elem) as usize];
            // last offset <= elem
            let t = offsets.partition_point(|&o| o <= elem) - 1;
            ErrorEntry {
                param: t as u32,
                element: (elem - offsets[t]) as u32,
                bit,
            }
        })
        .collect();
    map.canonicalize();
    Ok(map)
}

/// Toggles every listed bit. Nothing is modified unless every entry resolves.
pub fn apply_error_map(model: &mut ModelGraph, map: &ErrorMap) -> Result<(), InjectError> {
    let mut resolved = Vec::with_capacity(map.param_names.len());
    for name in &map.param_names {
        resolved.push(model.find(name));
    }
    for (i, e) in map.entries.iter().enumerate() {
        let Some(p) = resolved[e.param as usize] else {
            return Err(InjectError::Integrity {
                entry: i,
                reason: format!("unknown parameter `{}`", map.param_names[e.param as usize]),
            });
        };
        let len = model.parameters()[p].tensor.len();
        if e.element as usize >= len {
            return Err(InjectError::Integrity {
                entry: i,
                reason: format!(
                    "element {} out of range for `{}` ({} elements)",
                    e.element, map.param_names[e.param as usize], len
                ),
            });
        }
        if e.bit > 31 {
            return Err(InjectError::Integrity {
                entry: i,
                reason: format!("bit {} out of range", e.bit),
            });
        }
    }
    for e in &map.entries {
        let p = resolved[e.param as usize].expect("validated above");
        model.tensor_mut(p).toggle_bit(e.element as usize, e.bit as u32);
    }
    Ok(())
}
