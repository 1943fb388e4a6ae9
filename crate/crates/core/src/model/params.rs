use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{AttentionParams, AttentionVars, LaveParams, LayerMemory, MemoryVars, Router, ValueBank};
use crate::error::{Error, Result};
use crate::mla::{MlaParams, MlaVars};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// What a parameter tensor is for; drives weight decay and the audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Position,
    Norm,
    Attention,
    Ffn,
    Head,
    Router,
    /// The shared MoVE bank or a layer-local LaVE bank.
    Bank,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Norm | ParamKind::Router | ParamKind::Bank)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockAttention<S> {
    Mha(AttentionParams<S>),
    Mla(MlaParams<S>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub norm1: Tensor<S>,
    pub attn: BlockAttention<S>,
    pub memory: LayerMemory<S>,
    pub norm2: Tensor<S>,
    /// `d → 4d`
    pub w_up: Tensor<S>,
    /// `4d → d`
    pub w_down: Tensor<S>,
}

/// All weights of one network. The input embedding and the value bank are
/// separate tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub embed: Tensor<S>,
    /// Learned absolute positions (latent-attention variants only).
    pub pos: Option<Tensor<S>>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: Tensor<S>,
    /// Untied output head `d → N_vocab`.
    pub head: Tensor<S>,
    /// Global bank shared by every MoVE layer.
    pub bank: Option<ValueBank<S>>,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Independent random stream for one named tensor, so adding or removing a
/// tensor never shifts the initialization of the others.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed.to_le_bytes().into_iter().chain(name.bytes())))
}

struct Init {
    seed: u64,
}

impl Init {
    fn randn<S: Scalar>(&self, name: &str, shape: Vec<usize>, std: f64) -> Tensor<S> {
        Tensor::randn(shape, std, &mut tensor_rng(self.seed, name))
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization from `config.seed`. Banks and routers
    /// start at zero, so every memory variant starts as its memory-free twin.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, v, l) = (c.d_model, c.vocab, c.layers);
        let init = Init { seed: c.seed };
        let std_d = 1.0 / (d as f64).sqrt();
        let residual = 1.0 / ((2 * l) as f64).sqrt();
        let lave = c.lave_selection()?;
        let mut blocks = Vec::with_capacity(l);
        for i in 0..l {
            let p = |n: &str| format!("blocks.{i}.{n}");
            let attn = if c.variant.is_mla() {
                let dc = c.latent_dim();
                let std_c = 1.0 / (dc as f64).sqrt();
                BlockAttention::Mla(MlaParams {
                    w_dkv: init.randn(&p("attn.w_dkv"), vec![d, dc], std_d),
                    w_uk: init.randn(&p("attn.w_uk"), vec![dc, d], std_c),
                    w_uv: init.randn(&p("attn.w_uv"), vec![dc, d], std_c),
                    w_q: init.randn(&p("attn.w_q"), vec![d, d], std_d),
                    w_o: init.randn(&p("attn.w_o"), vec![d, d], std_d * residual),
                    heads: c.heads,
                    head_dim: c.head_dim(),
                    kv_heads: c.kv_heads(),
                    key_source: c.key_source,
                })
            } else {
                BlockAttention::Mha(AttentionParams {
                    w_q: init.randn(&p("attn.w_q"), vec![d, d], std_d),
                    w_k: init.randn(&p("attn.w_k"), vec![d, d], std_d),
                    w_v: init.randn(&p("attn.w_v"), vec![d, d], std_d),
                    w_o: init.randn(&p("attn.w_o"), vec![d, d], std_d * residual),
                    heads: c.heads,
                    head_dim: c.head_dim(),
                })
            };
            let (width, mh) = (c.memory_width(), c.memory_heads());
            let memory = if c.variant.is_move() {
                LayerMemory::Move(Router::zeros(d, mh, c.slots(), c.std_path))
            } else if lave.as_ref().is_some_and(|s| s.contains(i)) {
                LayerMemory::Lave(LaveParams::zeros(v, width, d, mh, c.std_path))
            } else {
                LayerMemory::None
            };
            blocks.push(Block {
                norm1: Tensor::ones(vec![d]),
                attn,
                memory,
                norm2: Tensor::ones(vec![d]),
                w_up: init.randn(&p("ffn.w_up"), vec![d, 4 * d], std_d),
                w_down: init.randn(&p("ffn.w_down"), vec![4 * d, d], residual / ((4 * d) as f64).sqrt()),
            });
        }
        Ok(ModelParams {
            config: c.clone(),
            embed: init.randn("embed", vec![v, d], 1.0),
            pos: c.variant.is_mla().then(|| init.randn("pos", vec![c.max_len, d], 0.1)),
            blocks,
            final_norm: Tensor::ones(vec![d]),
            head: init.randn("head", vec![d, v], 0.5 * std_d),
            bank: c.variant.is_move().then(|| ValueBank::zeros(v, c.slots(), c.memory_width())),
        })
    }

    /// Every tensor with its canonical name, in a fixed order shared by
    /// binding, checkpoints and the optimizer.
    pub fn named_tensors(&self) -> Vec<(String, ParamKind, &Tensor<S>)> {
        let mut out = vec![("embed".to_string(), ParamKind::Embedding, &self.embed)];
        if let Some(pos) = &self.pos {
            out.push(("pos".into(), ParamKind::Position, pos));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("norm1"), ParamKind::Norm, &b.norm1));
            match &b.attn {
                BlockAttention::Mha(a) => {
                    for (n, t) in [("attn.w_q", &a.w_q), ("attn.w_k", &a.w_k), ("attn.w_v", &a.w_v), ("attn.w_o", &a.w_o)] {
                        out.push((p(n), ParamKind::Attention, t));
                    }
                }
                BlockAttention::Mla(a) => {
                    for (n, t) in [
                        ("attn.w_q", &a.w_q),
                        ("attn.w_dkv", &a.w_dkv),
                        ("attn.w_uk", &a.w_uk),
                        ("attn.w_uv", &a.w_uv),
                        ("attn.w_o", &a.w_o),
                    ] {
                        out.push((p(n), ParamKind::Attention, t));
                    }
                }
            }
            match &b.memory {
                LayerMemory::None => {}
                LayerMemory::Move(r) => out.push((p("router"), ParamKind::Router, &r.weight)),
                LayerMemory::Lave(lv) => {
                    out.push((p("lave_bank"), ParamKind::Bank, &lv.bank));
                    out.push((p("router"), ParamKind::Router, &lv.router.weight));
                }
            }
            out.push((p("norm2"), ParamKind::Norm, &b.norm2));
            out.push((p("ffn.w_up"), ParamKind::Ffn, &b.w_up));
            out.push((p("ffn.w_down"), ParamKind::Ffn, &b.w_down));
        }
        out.push(("final_norm".into(), ParamKind::Norm, &self.final_norm));
        out.push(("head".into(), ParamKind::Head, &self.head));
        if let Some(bank) = &self.bank {
            out.push(("bank".into(), ParamKind::Bank, bank.tensor()));
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embed];
        if let Some(pos) = &mut self.pos {
            out.push(pos);
        }
        for b in &mut self.blocks {
            out.push(&mut b.norm1);
            match &mut b.attn {
                BlockAttention::Mha(a) => out.extend([&mut a.w_q, &mut a.w_k, &mut a.w_v, &mut a.w_o]),
                BlockAttention::Mla(a) => out.extend([&mut a.w_q, &mut a.w_dkv, &mut a.w_uk, &mut a.w_uv, &mut a.w_o]),
            }
            match &mut b.memory {
                LayerMemory::None => {}
                LayerMemory::Move(r) => out.push(&mut r.weight),
                LayerMemory::Lave(lv) => out.extend([&mut lv.bank, &mut lv.router.weight]),
            }
            out.extend([&mut b.norm2, &mut b.w_up, &mut b.w_down]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        if let Some(bank) = &mut self.bank {
            out.push(bank.tensor_mut());
        }
        out
    }

    /// Fills banks and routers with Gaussian noise (tests and probes).
    pub fn randomize_memory(&mut self, std: f64, seed: u64) {
        let names: Vec<(String, ParamKind)> = self.named_tensors().into_iter().map(|(n, k, _)| (n, k)).collect();
        for ((name, kind), t) in names.into_iter().zip(self.tensors_mut()) {
            if matches!(kind, ParamKind::Bank | ParamKind::Router) {
                *t = Tensor::randn(t.shape().to_vec(), std, &mut tensor_rng(seed, &name));
            }
        }
    }

    pub fn audit(&self) -> ParamAudit {
        let entries: Vec<AuditEntry> = self
            .named_tensors()
            .into_iter()
            .map(|(name, kind, t)| AuditEntry { name, kind, shape: t.shape().to_vec(), count: t.numel() })
            .collect();
        let sum = |f: &dyn Fn(&AuditEntry) -> bool| entries.iter().filter(|e| f(e)).map(|e| e.count).sum();
        ParamAudit {
            total: sum(&|_| true),
            shared_bank: sum(&|e| e.name == "bank"),
            layer_banks: sum(&|e| e.name.ends_with("lave_bank")),
            routers: sum(&|e| e.kind == ParamKind::Router),
            entries,
        }
    }

    /// Binds every tensor to `tape` as a parameter (or constant) leaf.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundModel {
        let leaves = self.leaves(tape, trainable);
        self.assemble(tape, leaves, None).expect("model tensors are consistent")
    }

    /// Structures caller-made leaves (one per tensor, canonical order).
    pub fn bind_existing(&self, tape: &mut Tape<S>, leaves: &[Var]) -> Result<BoundModel> {
        let n = self.named_tensors().len();
        if leaves.len() != n {
            return Err(Error::InvalidConfig(format!("expected {n} leaves, got {}", leaves.len())));
        }
        self.assemble(tape, leaves.to_vec(), None)
    }

    /// Like [`bind`](Self::bind), but only the listed layers read the shared
    /// bank through its parameter leaf; the others read a constant copy with
    /// identical values, so the forward pass is unchanged and the bank
    /// gradient collects only those layers' contributions.
    pub fn bind_bank_layers(&self, tape: &mut Tape<S>, layers: &[usize]) -> Result<BoundModel> {
        if self.bank.is_none() {
            return Err(Error::InvalidConfig(format!("variant {} has no shared bank", self.config.variant)));
        }
        let leaves = self.leaves(tape, true);
        self.assemble(tape, leaves, Some(layers))
    }

    fn leaves(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, _, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn assemble(&self, tape: &mut Tape<S>, leaves: Vec<Var>, bank_layers: Option<&[usize]>) -> Result<BoundModel> {
        let named = self.named_tensors();
        let vars: HashMap<&str, Var> = named.iter().map(|(n, _, _)| n.as_str()).zip(leaves.iter().copied()).collect();
        let get = |n: &str| vars[n];
        let bank = self.bank.as_ref().map(|_| get("bank"));
        let frozen_bank = match (bank_layers, &self.bank) {
            (Some(_), Some(b)) => Some(tape.constant(b.tensor().clone())),
            _ => None,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| get(&format!("blocks.{i}.{n}"));
            let attn = match &b.attn {
                BlockAttention::Mha(a) => BoundAttention::Mha {
                    vars: AttentionVars { w_q: p("attn.w_q"), w_k: p("attn.w_k"), w_v: p("attn.w_v"), w_o: p("attn.w_o") },
                    heads: a.heads,
                },
                BlockAttention::Mla(a) => BoundAttention::Mla(MlaVars {
                    w_dkv: p("attn.w_dkv"),
                    w_uk: p("attn.w_uk"),
                    w_uv: p("attn.w_uv"),
                    w_q: p("attn.w_q"),
                    w_o: p("attn.w_o"),
                    heads: a.heads,
                    head_dim: a.head_dim,
                    kv_heads: a.kv_heads,
                    key_source: a.key_source,
                }),
            };
            let layer_bank = match bank_layers {
                Some(ls) if !ls.contains(&i) => frozen_bank,
                _ => bank,
            };
            let memory = match &b.memory {
                LayerMemory::None => MemoryVars::None,
                LayerMemory::Move(r) => MemoryVars::Move {
                    bank: layer_bank.ok_or_else(|| Error::InvalidConfig("MoVE layer without a bank".into()))?,
                    router: p("router"),
                    slots: r.slots,
                    std_path: r.std_path,
                },
                LayerMemory::Lave(lv) => {
                    MemoryVars::Lave { bank: p("lave_bank"), router: p("router"), std_path: lv.router.std_path }
                }
            };
            blocks.push(BoundBlock {
                norm1: p("norm1"),
                attn,
                memory,
                norm2: p("norm2"),
                w_up: p("ffn.w_up"),
                w_down: p("ffn.w_down"),
            });
        }
        Ok(BoundModel {
            embed: get("embed"),
            pos: self.pos.as_ref().map(|_| get("pos")),
            blocks,
            final_norm: get("final_norm"),
            head: get("head"),
            bank,
            leaves,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundAttention {
    Mha { vars: AttentionVars, heads: usize },
    Mla(MlaVars),
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub norm1: Var,
    pub attn: BoundAttention,
    pub memory: MemoryVars,
    pub norm2: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for a whole model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: Var,
    pub pos: Option<Var>,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    pub head: Var,
    pub bank: Option<Var>,
    /// Every leaf in canonical tensor order.
    pub leaves: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AuditEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamAudit {
    pub entries: Vec<AuditEntry>,
    pub total: usize,
    pub shared_bank: usize,
    pub layer_banks: usize,
    pub routers: usize,
}
