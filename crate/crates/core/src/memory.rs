//! Long-term memory banks.
//!
//! Every policy keeps the reference frame in slot 0 and differs only in how
//! later frames enter the bank. Updates happen on frames whose index is a
//! multiple of `delta`; all other frames leave the bank untouched.
//!
//! | policy      | slots after frame `t`          |
//! |-------------|--------------------------------|
//! | `full`      | `1 + t / delta`                |
//! | `window:n`  | `1 + min(n, t / delta)`        |
//! | `refprev`   | `<= 2`, dynamic slot replaced  |
//! | `mca`       | `<= 2`, dynamic slot fused     |
//!
//! Under `mca` the first dynamic slot is stored as-is; each later update
//! replaces it with `MCA(new, old)`: queries from the incoming frame, keys and
//! modulator from the previous dynamic slot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::fusion::{modulated_cross_attention, BoundFusion, Grid, TokenMap};
use crate::params::{decode_stream, encode_stream};
use crate::tensor::{Precision, Scalar, Tensor};

pub const TRAIN_DELTA: usize = 2;
pub const EVAL_DELTA: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MemoryPolicy {
    FullBank,
    /// Keeps at most `n` slots besides the reference.
    Window(usize),
    RefPrev,
    Mca,
}

impl TryFrom<String> for MemoryPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MemoryPolicy> for String {
    fn from(p: MemoryPolicy) -> Self {
        p.to_string()
    }
}

impl FromStr for MemoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "fullbank" => Ok(Self::FullBank),
            "refprev" => Ok(Self::RefPrev),
            "mca" => Ok(Self::Mca),
            other => match other.strip_prefix("window:") {
                Some(n) => match n.parse::<usize>() {
                    Ok(n) if n >= 1 => Ok(Self::Window(n)),
                    _ => Err(Error::Config(format!("bad window size in '{other}'"))),
                },
                None => Err(Error::Config(format!("unknown memory policy '{other}'"))),
            },
        }
    }
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FullBank => f.write_str("full"),
            Self::Window(n) => write!(f, "window:{n}"),
            Self::RefPrev => f.write_str("refprev"),
            Self::Mca => f.write_str("mca"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Reference,
    Dynamic,
    Archived,
}

#[derive(Clone, Debug)]
pub struct MemorySlot<V> {
    pub visual: TokenMap<V>,
    /// Identity embedding aligned with `visual`, when the bank carries one.
    pub id: Option<TokenMap<V>>,
    pub frame_index: usize,
    pub kind: SlotKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub slot_count: usize,
    pub token_count: usize,
    /// `token_count * D * bytes_per_scalar` for the visual slots.
    pub logical_bytes: usize,
    /// Storage of the identity embeddings that ride along with the slots.
    pub id_bytes: usize,
    pub update_count: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBank<V> {
    policy: MemoryPolicy,
    delta: usize,
    slots: Vec<MemorySlot<V>>,
    grid: Grid,
    dim: usize,
    precision: Precision,
    update_count: usize,
    last_frame: usize,
}

impl<V: Clone> MemoryBank<V> {
    /// A bank holding only the reference slot (frame 0).
    pub fn init<T: Scalar>(
        reference: TokenMap<V>,
        id: Option<TokenMap<V>>,
        policy: MemoryPolicy,
        delta: usize,
    ) -> Result<Self> {
        if delta == 0 {
            return Err(Error::Validation("memory update period delta must be >= 1".into()));
        }
        if let MemoryPolicy::Window(0) = policy {
            return Err(Error::Validation("window policy needs n >= 1".into()));
        }
        let grid = match reference.grid {
            Some(g) if g.frames == 1 && reference.len > 0 => g,
            _ => {
                return Err(Error::Validation(
                    "reference features must be a single non-empty frame with grid dims".into(),
                ))
            }
        };
        if let Some(id) = &id {
            if id.len != reference.len {
                return Err(Error::dim("memory id", &[id.len, id.dim], &[reference.len, reference.dim]));
            }
        }
        Ok(Self {
            policy,
            delta,
            dim: reference.dim,
            slots: vec![MemorySlot {
                visual: reference,
                id,
                frame_index: 0,
                kind: SlotKind::Reference,
            }],
            grid,
            precision: T::PRECISION,
            update_count: 0,
            last_frame: 0,
        })
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> &[MemorySlot<V>] {
        &self.slots
    }

    pub fn last_frame(&self) -> usize {
        self.last_frame
    }

    pub fn has_ids(&self) -> bool {
        self.slots.iter().all(|s| s.id.is_some())
    }

    /// Feeds frame `frame_index` into the bank. Returns whether the bank changed.
    ///
    /// `weights` drive the fused update and are required by the `mca` policy.
    pub fn observe<B: Backend<Value = V>>(
        &mut self,
        b: &mut B,
        weights: Option<&BoundFusion<V>>,
        frame_index: usize,
        visual: TokenMap<V>,
        id: Option<TokenMap<V>>,
    ) -> Result<bool> {
        if frame_index <= self.last_frame {
            return Err(Error::Usage(format!(
                "frame index {frame_index} does not follow {}",
                self.last_frame
            )));
        }
        if visual.len != self.grid.tokens() || visual.dim != self.dim {
            return Err(Error::dim(
                "memory observe",
                &[visual.len, visual.dim],
                &[self.grid.tokens(), self.dim],
            ));
        }
        if id.is_some() != self.has_ids() {
            return Err(Error::Usage(
                "identity embeddings must be supplied consistently with the reference slot".into(),
            ));
        }
        self.last_frame = frame_index;
        if !frame_index.is_multiple_of(self.delta) {
            return Ok(false);
        }
        let slot = |visual, id, kind| MemorySlot {
            visual,
            id,
            frame_index,
            kind,
        };
        match self.policy {
            MemoryPolicy::FullBank => self.slots.push(slot(visual, id, SlotKind::Archived)),
            MemoryPolicy::Window(n) => {
                self.slots.push(slot(visual, id, SlotKind::Archived));
                while self.slots.len() > n + 1 {
                    self.slots.remove(1);
                }
            }
            MemoryPolicy::RefPrev => {
                self.slots.truncate(1);
                self.slots.push(slot(visual, id, SlotKind::Dynamic));
            }
            MemoryPolicy::Mca => {
                let w = weights.ok_or_else(|| Error::Usage("mca memory update needs fusion weights".into()))?;
                let fused = match self.slots.get(1) {
                    None => visual,
                    Some(old) => modulated_cross_attention(b, &visual, &old.visual, w)?.output,
                };
                self.slots.truncate(1);
                self.slots.push(slot(fused, id, SlotKind::Dynamic));
            }
        }
        self.update_count += 1;
        Ok(true)
    }

    /// All slots' visual tokens stacked along the token axis, reference first.
    pub fn context_tokens<B: Backend<Value = V>>(&self, b: &mut B) -> Result<TokenMap<V>> {
        let parts: Vec<&V> = self.slots.iter().map(|s| &s.visual.tokens).collect();
        let tokens = b.concat_rows(&parts)?;
        Ok(TokenMap::with_grid(tokens, self.stacked_grid(), self.dim))
    }

    /// Identity embeddings stacked in the same order as [`Self::context_tokens`].
    pub fn id_tokens<B: Backend<Value = V>>(&self, b: &mut B) -> Result<Option<TokenMap<V>>> {
        if !self.has_ids() {
            return Ok(None);
        }
        let parts: Vec<&V> = self
            .slots
            .iter()
            .filter_map(|s| s.id.as_ref().map(|i| &i.tokens))
            .collect();
        let dim = self.slots[0].id.as_ref().map(|i| i.dim).unwrap_or(self.dim);
        let tokens = b.concat_rows(&parts)?;
        Ok(Some(TokenMap::with_grid(tokens, self.stacked_grid(), dim)))
    }

    fn stacked_grid(&self) -> Grid {
        Grid {
            frames: self.slots.len(),
            ..self.grid
        }
    }

    pub fn stats(&self) -> MemoryStats {
        let per_slot = self.grid.tokens();
        let token_count = per_slot * self.slots.len();
        let id_dim: usize = self.slots.iter().filter_map(|s| s.id.as_ref()).map(|i| i.dim * per_slot).sum();
        MemoryStats {
            slot_count: self.slots.len(),
            token_count,
            logical_bytes: token_count * self.dim * self.precision.bytes(),
            id_bytes: id_dim * self.precision.bytes(),
            update_count: self.update_count,
        }
    }

    /// Serializes the bank through the scalar-stream format.
    pub fn snapshot<B: Backend<Value = V>>(&self, b: &B) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut slots = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            tensors.push((format!("slot{i}.visual"), b.get(&s.visual.tokens).clone()));
            if let Some(id) = &s.id {
                tensors.push((format!("slot{i}.id"), b.get(&id.tokens).clone()));
            }
            slots.push(json!({"frame_index": s.frame_index, "kind": s.kind}));
        }
        let meta = json!({
            "kind": "memory-bank",
            "policy": self.policy.to_string(),
            "delta": self.delta,
            "grid": [self.grid.h, self.grid.w],
            "dim": self.dim,
            "update_count": self.update_count,
            "last_frame": self.last_frame,
            "slots": slots,
        });
        encode_stream::<B::Scalar>(meta, &tensors)
    }

    pub fn restore<B: Backend<Value = V>>(b: &mut B, bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode_stream::<B::Scalar>(bytes)?;
        let bad = |what: &str| Error::Config(format!("memory snapshot: bad or missing '{what}'"));
        if meta["kind"] != "memory-bank" {
            return Err(bad("kind"));
        }
        let policy: MemoryPolicy = meta["policy"].as_str().ok_or_else(|| bad("policy"))?.parse()?;
        let field = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(k));
        let delta = field("delta")?;
        let dim = field("dim")?;
        let grid = match meta["grid"].as_array().map(|a| a.iter().map(|v| v.as_u64()).collect::<Vec<_>>()) {
            Some(v) if v.len() == 2 && v.iter().all(Option::is_some) => {
                Grid::new(v[0].unwrap_or(0) as usize, v[1].unwrap_or(0) as usize)
            }
            _ => return Err(bad("grid")),
        };
        let slot_meta = meta["slots"].as_array().ok_or_else(|| bad("slots"))?;
        let find = |name: String| -> Option<Tensor<B::Scalar>> {
            tensors.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone())
        };
        let mut slots = Vec::with_capacity(slot_meta.len());
        for (i, sm) in slot_meta.iter().enumerate() {
            let visual = find(format!("slot{i}.visual")).ok_or_else(|| bad("slot visual"))?;
            let id = find(format!("slot{i}.id"));
            let kind: SlotKind = serde_json::from_value(sm["kind"].clone()).map_err(|_| bad("slot kind"))?;
            let frame_index = sm["frame_index"].as_u64().ok_or_else(|| bad("frame_index"))? as usize;
            let id = match id {
                Some(t) => {
                    let id_dim = t.shape()[1];
                    Some(TokenMap::with_grid(b.constant(t), grid, id_dim))
                }
                None => None,
            };
            if visual.shape() != [grid.tokens(), dim] {
                return Err(bad("slot shape"));
            }
            slots.push(MemorySlot {
                visual: TokenMap::with_grid(b.constant(visual), grid, dim),
                id,
                frame_index,
                kind,
            });
        }
        if slots.first().map(|s| s.kind) != Some(SlotKind::Reference) {
            return Err(bad("reference slot"));
        }
        Ok(Self {
            policy,
            delta,
            slots,
            grid,
            dim,
            precision: <B::Scalar as Scalar>::PRECISION,
            update_count: field("update_count")?,
            last_frame: field("last_frame")?,
        })
    }
}
