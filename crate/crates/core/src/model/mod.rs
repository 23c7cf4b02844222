//! Diffusion transformer over per-direction image patches with b-vector and
//! timestep conditioned modulation (QGAM).
//!
//! Tokens are laid out `[B, N, P, D]`: batch, gradient direction, spatial
//! patch, feature. Volumes are `[B, H, W, N]` with the direction index
//! fastest, matching [`crate::volume::DwiVolume`].

mod config;
pub mod encoding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{AttentionLayout, InitScheme, ModelConfig, SignalNorm};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::sphere_sh::Direction;
use crate::volume::AngularMask;

const LN_EPS: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-6;

/// Per-sample conditioning of one forward pass. All samples of a batch share
/// the direction set.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub bvecs: &'a [Direction],
    /// One mask per batch sample.
    pub masks: &'a [AngularMask],
    /// One timestep in `[1, T]` per batch sample.
    pub t: &'a [usize],
}

/// Nodes produced by [`PgDit::forward`].
pub struct ForwardOutput {
    /// Predicted noise, `[B, H, W, N]`.
    pub eps: Var,
    /// Token states `[B, N, P, D]`: after embedding, then after each block.
    pub tokens: Vec<Var>,
}

/// The six per-(sample, direction) modulation vectors of one block, each
/// `[B, N, D]`. Scales act as `1 + scale`, so all-zero is neutral apart from
/// the gates.
#[derive(Debug, Clone)]
pub struct ModulationParams<T> {
    pub scale_attn: Tensor<T>,
    pub shift_attn: Tensor<T>,
    pub gate_attn: Tensor<T>,
    pub scale_mlp: Tensor<T>,
    pub shift_mlp: Tensor<T>,
    pub gate_mlp: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Dense,
    Zeros,
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    modulation: Option<Linear>,
    qkv: Linear,
    proj: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: Linear,
    mask_embed: usize,
    qgam: Option<(Linear, Linear)>,
    blocks: Vec<BlockLayout>,
    head: Linear,
}

/// Vars of one block's parameters plus its modulation, as consumed by
/// [`block_forward`].
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub qkv: (Var, Var),
    pub proj: (Var, Var),
    pub mlp_in: (Var, Var),
    pub mlp_out: (Var, Var),
}

/// Graph-level modulation of one block, each `[B, N, P, D]` after broadcast.
#[derive(Debug, Clone, Copy)]
pub struct BlockModulation {
    pub scale_attn: Var,
    pub shift_attn: Var,
    pub gate_attn: Var,
    pub scale_mlp: Var,
    pub shift_mlp: Var,
    pub gate_mlp: Var,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let p2 = cfg.patch * cfg.patch;
    let hidden = cfg.mlp_ratio * d;
    let mut specs = vec![
        ("patch_embed.w".to_string(), vec![p2, d], Init::Dense),
        ("patch_embed.b".to_string(), vec![1, d], Init::Zeros),
        ("mask_embed".to_string(), vec![2, d], Init::Dense),
    ];
    if cfg.qgam {
        specs.push(("qgam.fc1.w".into(), vec![3 + d, d], Init::Dense));
        specs.push(("qgam.fc1.b".into(), vec![1, d], Init::Zeros));
        specs.push(("qgam.fc2.w".into(), vec![d, d], Init::Dense));
        specs.push(("qgam.fc2.b".into(), vec![1, d], Init::Zeros));
    }
    for i in 0..cfg.depth {
        if cfg.qgam {
            specs.push((format!("blocks.{i}.modulation.w"), vec![d, 6 * d], Init::Zeros));
            specs.push((format!("blocks.{i}.modulation.b"), vec![1, 6 * d], Init::Zeros));
        }
        for (name, fi, fo) in [("qkv", d, 3 * d), ("proj", d, d), ("mlp_in", d, hidden), ("mlp_out", hidden, d)] {
            specs.push((format!("blocks.{i}.{name}.w"), vec![fi, fo], Init::Dense));
            specs.push((format!("blocks.{i}.{name}.b"), vec![1, fo], Init::Zeros));
        }
    }
    specs.push(("head.w".into(), vec![d, p2], Init::Zeros));
    specs.push(("head.b".into(), vec![1, p2], Init::Zeros));
    specs
}

fn build_layout(cfg: &ModelConfig, store_names: &[String]) -> Result<Layout> {
    let find = |name: &str| {
        store_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    };
    let lin = |prefix: &str| -> Result<Linear> {
        Ok(Linear {
            w: find(&format!("{prefix}.w"))?,
            b: find(&format!("{prefix}.b"))?,
        })
    };
    let qgam = if cfg.qgam {
        Some((lin("qgam.fc1")?, lin("qgam.fc2")?))
    } else {
        None
    };
    let blocks = (0..cfg.depth)
        .map(|i| {
            Ok(BlockLayout {
                modulation: if cfg.qgam {
                    Some(lin(&format!("blocks.{i}.modulation"))?)
                } else {
                    None
                },
                qkv: lin(&format!("blocks.{i}.qkv"))?,
                proj: lin(&format!("blocks.{i}.proj"))?,
                mlp_in: lin(&format!("blocks.{i}.mlp_in"))?,
                mlp_out: lin(&format!("blocks.{i}.mlp_out"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Layout {
        patch_embed: lin("patch_embed")?,
        mask_embed: find("mask_embed")?,
        qgam,
        blocks,
        head: lin("head")?,
    })
}

/// `x [rows, in] · w [in, out] + b [1, out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let shape = g.shape(y).to_vec();
    let b = g.expand(b, &shape)?;
    g.add(y, b)
}

/// Splits `[B, H, W, N]` into raw patches `[B, N, P, p²]`, patches in raster
/// order and pixels row-major within a patch.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, patch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape("patchify", format!("{s:?} with patch {patch}")));
    }
    let (b, h, w, n) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let x = g.reshape(x, &[b, gh, patch, gw, patch, n])?;
    let x = g.transpose(x, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(x, &[b, n, gh * gw, patch * patch])
}

/// Inverse of [`patchify`] for an `h × w` image.
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize, patch: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 4 || patch == 0 || h % patch != 0 || w % patch != 0 || s[2] * patch * patch != h * w || s[3] != patch * patch {
        return Err(Error::shape("unpatchify", format!("{s:?} into {h}x{w} with patch {patch}")));
    }
    let (b, n) = (s[0], s[1]);
    let x = g.reshape(tokens, &[b, n, h / patch, w / patch, patch, patch])?;
    let x = g.transpose(x, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(x, &[b, h, w, n])
}

/// Multi-head self-attention on `[B, N, P, D]` tokens (input already
/// normalised and modulated). Returns `[B, N, P, D]`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    x: Var,
    qkv: (Var, Var),
    proj: (Var, Var),
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, p, d) = (s[0], s[1], s[2], s[3]);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let flat = g.reshape(x, &[b * n * p, d])?;
    let qkv_out = linear(g, flat, qkv.0, qkv.1)?;
    let parts = g.split(qkv_out, 1, &[d, d, d])?;
    let mut qkv5 = Vec::with_capacity(3);
    for part in parts {
        qkv5.push(g.reshape(part, &[b, n, p, heads, dh])?);
    }
    let (q, k, v) = (qkv5[0], qkv5[1], qkv5[2]);

    let attend = |g: &mut Graph<T>, q: Var, kt: Var, v: Var| -> Result<Var> {
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s)?;
        g.matmul(a, v)
    };

    let out = match cfg.attention {
        AttentionLayout::Joint => {
            let q = g.reshape(q, &[b, n * p, heads, dh])?;
            let k = g.reshape(k, &[b, n * p, heads, dh])?;
            let v = g.reshape(v, &[b, n * p, heads, dh])?;
            let q = g.transpose(q, &[0, 2, 1, 3])?;
            let kt = g.transpose(k, &[0, 2, 3, 1])?;
            let v = g.transpose(v, &[0, 2, 1, 3])?;
            let o = attend(g, q, kt, v)?;
            g.transpose(o, &[0, 2, 1, 3])?
        }
        AttentionLayout::Axial => {
            let hs = heads / 2;
            let ha = heads - hs;
            // Spatial heads: attend over patches within one direction.
            let qs = g.narrow(q, 3, 0, hs)?;
            let ks = g.narrow(k, 3, 0, hs)?;
            let vs = g.narrow(v, 3, 0, hs)?;
            let qs = g.transpose(qs, &[0, 1, 3, 2, 4])?;
            let kst = g.transpose(ks, &[0, 1, 3, 4, 2])?;
            let vs = g.transpose(vs, &[0, 1, 3, 2, 4])?;
            let os = attend(g, qs, kst, vs)?;
            let os = g.transpose(os, &[0, 1, 3, 2, 4])?;
            // Angular heads: attend over directions within one patch.
            let qa = g.narrow(q, 3, hs, ha)?;
            let ka = g.narrow(k, 3, hs, ha)?;
            let va = g.narrow(v, 3, hs, ha)?;
            let qa = g.transpose(qa, &[0, 2, 3, 1, 4])?;
            let kat = g.transpose(ka, &[0, 2, 3, 4, 1])?;
            let va = g.transpose(va, &[0, 2, 3, 1, 4])?;
            let oa = attend(g, qa, kat, va)?;
            let oa = g.transpose(oa, &[0, 3, 1, 2, 4])?;
            g.concat(&[os, oa], 3)?
        }
    };
    let out = g.reshape(out, &[b * n * p, d])?;
    let out = linear(g, out, proj.0, proj.1)?;
    g.reshape(out, &[b, n, p, d])
}

fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    g.add(y, shift)
}

/// One transformer block on `[B, N, P, D]` tokens:
/// `h ← h + g_attn ⊙ Attn((1 + γ_attn) ⊙ LN(h) + β_attn)`, then the same with
/// the MLP. `mods = None` is the neutral modulation (γ = β = 0, g = 1).
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &BlockVars,
    h: Var,
    mods: Option<&BlockModulation>,
) -> Result<Var> {
    let x = g.layer_norm(h, LN_EPS)?;
    let x = match mods {
        Some(m) => modulate(g, x, m.scale_attn, m.shift_attn)?,
        None => x,
    };
    let a = attention(g, cfg, x, vars.qkv, vars.proj)?;
    let a = match mods {
        Some(m) => g.mul(a, m.gate_attn)?,
        None => a,
    };
    let h = g.add(h, a)?;

    let s = g.shape(h).to_vec();
    let x = g.layer_norm(h, LN_EPS)?;
    let x = match mods {
        Some(m) => modulate(g, x, m.scale_mlp, m.shift_mlp)?,
        None => x,
    };
    let rows = s[0] * s[1] * s[2];
    let x = g.reshape(x, &[rows, s[3]])?;
    let x = linear(g, x, vars.mlp_in.0, vars.mlp_in.1)?;
    let x = g.gelu(x);
    let x = linear(g, x, vars.mlp_out.0, vars.mlp_out.1)?;
    let x = g.reshape(x, &s)?;
    let x = match mods {
        Some(m) => g.mul(x, m.gate_mlp)?,
        None => x,
    };
    g.add(h, x)
}

/// Diffusion transformer with its parameters.
#[derive(Debug, Clone)]
pub struct PgDit<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> PgDit<T> {
    /// Freshly initialised model; modulation and output heads start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            match init {
                Init::Zeros => store.insert_zeros(&name, &shape)?,
                Init::Dense => {
                    let std = match config.init {
                        InitScheme::Xavier => (2.0 / (shape[0] + shape[1]) as f64).sqrt(),
                        InitScheme::StandardNormal => 1.0,
                    };
                    store.insert_normal(&name, &shape, std, &mut rng)?
                }
            };
        }
        let layout = build_layout(&config, store.names())?;
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model config expects {}",
                params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        let layout = build_layout(&config, params.names())?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Names of the QGAM encoder and modulation-head parameters.
    pub fn qgam_param_names(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| n.starts_with("qgam.") || n.contains(".modulation."))
            .collect()
    }

    /// Registers all parameters in `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn check_conditioning(&self, cond: &Conditioning<'_>, batch: usize, n_dirs: usize) -> Result<()> {
        if cond.bvecs.len() != n_dirs {
            return Err(Error::DimensionMismatch(format!(
                "{} b-vectors for {n_dirs} volume directions",
                cond.bvecs.len()
            )));
        }
        if cond.masks.len() != batch || cond.t.len() != batch {
            return Err(Error::DimensionMismatch(format!(
                "batch {batch} with {} masks and {} timesteps",
                cond.masks.len(),
                cond.t.len()
            )));
        }
        if let Some(m) = cond.masks.iter().find(|m| m.len() != n_dirs) {
            return Err(Error::DimensionMismatch(format!("mask over {} directions, volume has {n_dirs}", m.len())));
        }
        if let Some(&t) = cond.t.iter().find(|&&t| t == 0 || t > self.config.timesteps) {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.timesteps,
            });
        }
        for (index, u) in cond.bvecs.iter().enumerate() {
            let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitDirection { index, norm });
            }
        }
        Ok(())
    }

    /// QGAM encoder output `[B·N, D]` for the batch's (b-vector, timestep)
    /// pairs, or `None` for the ablation.
    fn qgam_features(&self, g: &mut Graph<T>, vars: &[Var], bvecs: &[Direction], t: &[usize]) -> Result<Option<Var>> {
        let Some((fc1, fc2)) = &self.layout.qgam else {
            return Ok(None);
        };
        let d = self.config.dim;
        let temb = encoding::timestep_embedding(t, d);
        let mut input = Vec::with_capacity(t.len() * bvecs.len() * (3 + d));
        for b in 0..t.len() {
            for u in bvecs {
                input.extend_from_slice(u);
                input.extend_from_slice(&temb[b * d..(b + 1) * d]);
            }
        }
        let x = g.constant(Tensor::from_f64(&[t.len() * bvecs.len(), 3 + d], &input)?);
        let x = linear(g, x, vars[fc1.w], vars[fc1.b])?;
        let x = g.gelu(x);
        let x = linear(g, x, vars[fc2.w], vars[fc2.b])?;
        Ok(Some(g.gelu(x)))
    }

    /// Raw six-way modulation outputs of `block`, each `[B·N, D]`.
    fn block_modulation_raw(&self, g: &mut Graph<T>, vars: &[Var], block: usize, feats: Var) -> Result<Option<Vec<Var>>> {
        let Some(lin) = &self.layout.blocks[block].modulation else {
            return Ok(None);
        };
        let d = self.config.dim;
        let m = linear(g, feats, vars[lin.w], vars[lin.b])?;
        Ok(Some(g.split(m, 1, &[d; 6])?))
    }

    /// Per-block modulation for b-vectors × timesteps, each tensor `[B, N, D]`
    /// with `B = t.len()`. Empty for the ablation.
    pub fn qgam_modulation(&self, bvecs: &[Direction], t: &[usize]) -> Result<Vec<ModulationParams<T>>> {
        let masks = vec![AngularMask::all_observed(bvecs.len()); t.len()];
        self.check_conditioning(
            &Conditioning {
                bvecs,
                masks: &masks,
                t,
            },
            t.len(),
            bvecs.len(),
        )?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let Some(feats) = self.qgam_features(&mut g, &vars, bvecs, t)? else {
            return Ok(Vec::new());
        };
        let shape = [t.len(), bvecs.len(), self.config.dim];
        let mut out = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let parts = self.block_modulation_raw(&mut g, &vars, i, feats)?.expect("qgam enabled");
            let get = |v: Var| Tensor::new(shape.to_vec(), g.value(v).data().to_vec());
            out.push(ModulationParams {
                scale_attn: get(parts[0])?,
                shift_attn: get(parts[1])?,
                gate_attn: get(parts[2])?,
                scale_mlp: get(parts[3])?,
                shift_mlp: get(parts[4])?,
                gate_mlp: get(parts[5])?,
            });
        }
        Ok(out)
    }

    /// Block parameter vars of block `i`.
    pub fn block_vars(&self, vars: &[Var], i: usize) -> BlockVars {
        let l = &self.layout.blocks[i];
        BlockVars {
            qkv: (vars[l.qkv.w], vars[l.qkv.b]),
            proj: (vars[l.proj.w], vars[l.proj.b]),
            mlp_in: (vars[l.mlp_in.w], vars[l.mlp_in.b]),
            mlp_out: (vars[l.mlp_out.w], vars[l.mlp_out.b]),
        }
    }

    /// Full forward pass on `[B, H, W, N]` inputs. Observed directions of
    /// each sample are read from `x_obs`, masked ones from `x_t`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x_t: Var, x_obs: Var, cond: &Conditioning<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = g.shape(x_t).to_vec();
        if s.len() != 4 || g.shape(x_obs) != s.as_slice() {
            return Err(Error::shape("predict_noise", format!("x_t {s:?}, x_obs {:?}", g.shape(x_obs))));
        }
        let (b, h, w, n) = (s[0], s[1], s[2], s[3]);
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::shape("patchify", format!("{h}x{w} image with patch {}", cfg.patch)));
        }
        self.check_conditioning(cond, b, n)?;
        let (gh, gw) = (h / cfg.patch, w / cfg.patch);
        let p = gh * gw;
        let d = cfg.dim;

        // Token-level selection of clean observed and noisy masked directions.
        let mut sel = vec![0.0; b * h * w * n];
        let mut one_hot = vec![0.0; b * n * 2];
        for (bi, mask) in cond.masks.iter().enumerate() {
            for dir in 0..n {
                let observed = mask.is_observed(dir);
                one_hot[(bi * n + dir) * 2 + usize::from(!observed)] = 1.0;
                if observed {
                    for px in 0..h * w {
                        sel[(bi * h * w + px) * n + dir] = 1.0;
                    }
                }
            }
        }
        let m = g.constant(Tensor::from_f64(&s, &sel)?);
        let inv = g.constant(Tensor::from_f64(&s, &sel.iter().map(|v| 1.0 - v).collect::<Vec<_>>())?);
        let a = g.mul(m, x_obs)?;
        let c = g.mul(inv, x_t)?;
        let x_in = g.add(a, c)?;

        let patches = patchify(g, x_in, cfg.patch)?;
        let patches = g.reshape(patches, &[b * n * p, cfg.patch * cfg.patch])?;
        let pe = &self.layout.patch_embed;
        let tok = linear(g, patches, vars[pe.w], vars[pe.b])?;
        let tok = g.reshape(tok, &[b, n, p, d])?;

        let spatial = encoding::spatial_encoding(gh, gw, d);
        let angular = encoding::angular_encoding(cond.bvecs, cfg.angular_freqs, d)?;
        let mut enc = Vec::with_capacity(b * n * p * d);
        for _ in 0..b {
            for dir in 0..n {
                for pi in 0..p {
                    let sp = &spatial[pi * d..(pi + 1) * d];
                    let an = &angular[dir * d..(dir + 1) * d];
                    enc.extend(sp.iter().zip(an).map(|(x, y)| x + y));
                }
            }
        }
        let enc = g.constant(Tensor::from_f64(&[b, n, p, d], &enc)?);
        let tok = g.add(tok, enc)?;
        let oh = g.constant(Tensor::from_f64(&[b * n, 2], &one_hot)?);
        let me = g.matmul(oh, vars[self.layout.mask_embed])?;
        let me = g.reshape(me, &[b, n, 1, d])?;
        let me = g.expand(me, &[b, n, p, d])?;
        let mut hid = g.add(tok, me)?;

        let feats = self.qgam_features(g, vars, cond.bvecs, cond.t)?;
        let mut tokens = vec![hid];
        for i in 0..cfg.depth {
            let mods = match feats {
                Some(f) => {
                    let raw = self.block_modulation_raw(g, vars, i, f)?.expect("qgam enabled");
                    let mut e = Vec::with_capacity(6);
                    for r in raw {
                        let r = g.reshape(r, &[b, n, 1, d])?;
                        e.push(g.expand(r, &[b, n, p, d])?);
                    }
                    Some(BlockModulation {
                        scale_attn: e[0],
                        shift_attn: e[1],
                        gate_attn: e[2],
                        scale_mlp: e[3],
                        shift_mlp: e[4],
                        gate_mlp: e[5],
                    })
                }
                None => None,
            };
            let bv = self.block_vars(vars, i);
            hid = block_forward(g, cfg, &bv, hid, mods.as_ref())?;
            tokens.push(hid);
        }

        let x = g.layer_norm(hid, LN_EPS)?;
        let x = g.reshape(x, &[b * n * p, d])?;
        let hd = &self.layout.head;
        let x = linear(g, x, vars[hd.w], vars[hd.b])?;
        let x = g.reshape(x, &[b, n, p, cfg.patch * cfg.patch])?;
        let eps = unpatchify(g, x, h, w, cfg.patch)?;
        Ok(ForwardOutput { eps, tokens })
    }

    /// ε̂ for a batch `[B, H, W, N]` with frozen parameters.
    pub fn predict_noise(&self, x_t: &Tensor<T>, x_obs: &Tensor<T>, cond: &Conditioning<'_>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xt = g.constant(x_t.clone());
        let xo = g.constant(x_obs.clone());
        let out = self.forward(&mut g, &vars, xt, xo, cond)?;
        Ok(g.value(out.eps).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_directions;
    use rand::Rng;

    fn small(attention: AttentionLayout, qgam: bool) -> ModelConfig {
        ModelConfig {
            depth: 2,
            heads: 2,
            dim: 16,
            patch: 2,
            angular_freqs: 2,
            timesteps: 100,
            qgam,
            attention,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn perturb(model: &mut PgDit<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        }
    }

    #[test]
    fn param_count_matches_store() {
        for layout in [AttentionLayout::Joint, AttentionLayout::Axial] {
            for qgam in [true, false] {
                let cfg = small(layout, qgam);
                let m = PgDit::<f64>::new(cfg.clone()).unwrap();
                assert_eq!(m.params().numel(), cfg.param_count());
            }
        }
    }

    #[test]
    fn patchify_round_trip_exact() {
        let x = random(&[2, 4, 6, 3], 1);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = patchify(&mut g, v, 2).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 6, 4]);
        let back = unpatchify(&mut g, p, 4, 6, 2).unwrap();
        assert_eq!(g.value(back), &x);
        let whole = patchify(&mut g, v, 1).unwrap();
        assert_eq!(g.shape(whole), &[2, 3, 24, 1]);
        assert!(patchify(&mut g, v, 4).is_err());
    }

    #[test]
    fn zero_init_predicts_zero_noise() {
        let dirs = generate_directions(6, 2).unwrap();
        let model = PgDit::<f64>::new(small(AttentionLayout::Joint, true)).unwrap();
        let masks = vec![AngularMask::from_observed_indices(6, &[0, 3]).unwrap()];
        let cond = Conditioning {
            bvecs: &dirs,
            masks: &masks,
            t: &[7],
        };
        let eps = model.predict_noise(&random(&[1, 4, 4, 6], 2), &random(&[1, 4, 4, 6], 3), &cond).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
        for m in model.qgam_modulation(&dirs, &[1, 50]).unwrap() {
            for t in [&m.scale_attn, &m.shift_attn, &m.gate_attn, &m.scale_mlp, &m.shift_mlp, &m.gate_mlp] {
                assert_eq!(t.shape(), &[2, 6, 16]);
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_conditioning() {
        let dirs = generate_directions(6, 2).unwrap();
        let model = PgDit::<f64>::new(small(AttentionLayout::Joint, true)).unwrap();
        let masks = vec![AngularMask::all_observed(6)];
        let x = random(&[1, 4, 4, 6], 2);
        for t in [0, 101] {
            let cond = Conditioning {
                bvecs: &dirs,
                masks: &masks,
                t: &[t],
            };
            assert!(matches!(model.predict_noise(&x, &x, &cond), Err(Error::TimestepOutOfRange { .. })));
        }
        let mut bad = dirs.clone();
        bad[2] = [1.0, 1.0, 0.0];
        assert!(matches!(model.qgam_modulation(&bad, &[3]), Err(Error::NonUnitDirection { index: 2, .. })));
    }

    #[test]
    fn neutral_modulation_is_plain_prenorm_block() {
        // Explicit zero modulation with unit gates equals the unmodulated path.
        let cfg = small(AttentionLayout::Joint, false);
        let model = PgDit::<f64>::new(cfg.clone()).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let h = g.constant(random(&[1, 3, 4, 16], 9));
        let zero = g.constant(Tensor::zeros(&[1, 3, 4, 16]));
        let one = g.constant(Tensor::full(&[1, 3, 4, 16], 1.0));
        let mods = BlockModulation {
            scale_attn: zero,
            shift_attn: zero,
            gate_attn: one,
            scale_mlp: zero,
            shift_mlp: zero,
            gate_mlp: one,
        };
        let bv = model.block_vars(&vars, 0);
        let a = block_forward(&mut g, &cfg, &bv, h, Some(&mods)).unwrap();
        let b = block_forward(&mut g, &cfg, &bv, h, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(h));
    }

    #[test]
    fn blocks_are_identity_at_init() {
        let dirs = generate_directions(6, 4).unwrap();
        for layout in [AttentionLayout::Joint, AttentionLayout::Axial] {
            let model = PgDit::<f64>::new(small(layout, true)).unwrap();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let x = g.constant(random(&[2, 4, 4, 6], 4));
            let masks = vec![AngularMask::from_observed_indices(6, &[1]).unwrap(); 2];
            let cond = Conditioning {
                bvecs: &dirs,
                masks: &masks,
                t: &[3, 90],
            };
            let out = model.forward(&mut g, &vars, x, x, &cond).unwrap();
            for w in out.tokens.windows(2) {
                assert_eq!(g.value(w[0]), g.value(w[1]));
            }
        }
    }

    #[test]
    fn direction_permutation_equivariance() {
        let dirs = generate_directions(5, 8).unwrap();
        let perm = [3, 0, 4, 1, 2];
        for layout in [AttentionLayout::Joint, AttentionLayout::Axial] {
            let mut model = PgDit::<f64>::new(small(layout, true)).unwrap();
            perturb(&mut model, 1);
            let x = random(&[1, 4, 4, 5], 10);
            let xo = random(&[1, 4, 4, 5], 11);
            let mask = AngularMask::from_observed_indices(5, &[0, 2]).unwrap();
            let eps = model
                .predict_noise(&x, &xo, &Conditioning { bvecs: &dirs, masks: &[mask.clone()], t: &[40] })
                .unwrap();
            let permute = |t: &Tensor<f64>| {
                let d: Vec<f64> = t.data().chunks(5).flat_map(|v| perm.iter().map(move |&p| v[p])).collect();
                Tensor::new(t.shape().to_vec(), d).unwrap()
            };
            let pd: Vec<Direction> = perm.iter().map(|&p| dirs[p]).collect();
            let eps_p = model
                .predict_noise(&permute(&x), &permute(&xo), &Conditioning { bvecs: &pd, masks: &[mask.permuted(&perm)], t: &[40] })
                .unwrap();
            let expect = permute(&eps);
            let err = expect.data().iter().zip(eps_p.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "{layout:?}: {err}");
            assert!(eps.data().iter().any(|v| v.abs() > 1e-3));
        }
    }

    #[test]
    fn deterministic_forward() {
        let dirs = generate_directions(4, 8).unwrap();
        let mut model = PgDit::<f32>::new(small(AttentionLayout::Axial, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0f32..1.0));
        }
        let x: Tensor<f32> = random(&[1, 4, 4, 4], 3).cast();
        let masks = [AngularMask::from_observed_indices(4, &[1]).unwrap()];
        let cond = Conditioning { bvecs: &dirs, masks: &masks, t: &[12] };
        let a = model.predict_noise(&x, &x, &cond).unwrap();
        let b = model.predict_noise(&x, &x, &cond).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn qgam_parameters_receive_gradient() {
        let dirs = generate_directions(4, 8).unwrap();
        let mut model = PgDit::<f64>::new(small(AttentionLayout::Joint, true)).unwrap();
        perturb(&mut model, 2);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let x = g.constant(random(&[1, 4, 4, 4], 5));
        let target = g.constant(random(&[1, 4, 4, 4], 6));
        let masks = [AngularMask::from_observed_indices(4, &[0]).unwrap()];
        let cond = Conditioning { bvecs: &dirs, masks: &masks, t: &[30] };
        let out = model.forward(&mut g, &vars, x, x, &cond).unwrap();
        let loss = g.mse(out.eps, target).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in model.qgam_param_names() {
            let i = model.params().index_of(name).unwrap();
            let gr = grads.get(vars[i]).unwrap();
            assert!(gr.data().iter().any(|v| v.abs() > 0.0), "{name}");
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let cfg = small(AttentionLayout::Joint, true);
        let model = PgDit::<f64>::new(cfg.clone()).unwrap();
        let store = model.params().clone();
        assert!(PgDit::from_params(cfg.clone(), store.clone()).is_ok());
        let other = ModelConfig { dim: 32, ..cfg.clone() };
        assert!(PgDit::from_params(other, store).is_err());
        let ablated = ModelConfig { qgam: false, ..cfg };
        assert!(PgDit::from_params(ablated, model.into_params()).is_err());
    }
}
