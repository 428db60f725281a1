//! Encoder-decoder U-Net with FiLM noise conditioning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Channel, Field, Grid};

use super::config::NetConfig;
use super::ops::{
    silu_backward, silu_forward, upsample2x, upsample2x_backward, AttnCache, Attention, Conv, Dense, Film,
    GroupNorm, NormCache, Tensor,
};
use super::params::{Init, ParamBuilder, Parameters, Slot};

/// `[sin(2 pi f_j c), cos(2 pi f_j c)]` for each frequency.
pub fn fourier_embed(c_noise: f64, freqs: &[f64]) -> Vec<f64> {
    let phase: Vec<f64> = freqs.iter().map(|f| 2.0 * std::f64::consts::PI * f * c_noise).collect();
    phase.iter().map(|p| p.sin()).chain(phase.iter().map(|p| p.cos())).collect()
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    film: Dense,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct ResCache {
    x: Tensor,
    n1: NormCache,
    a1: Tensor,
    h1: Tensor,
    film: Film,
    n2: NormCache,
    a2: Tensor,
    h2: Tensor,
}

impl ResBlock {
    fn forward(&self, p: &[f64], x: &Tensor, emb: &[f64]) -> (Tensor, ResCache) {
        let (a1, n1) = self.norm1.forward(p, x, None);
        let h1 = silu_forward(&a1);
        let c1 = self.conv1.forward(p, &h1);
        let ab = self.film.forward(p, emb);
        let cout = self.conv1.cout;
        let film = Film {
            scale: ab[..cout].to_vec(),
            shift: ab[cout..].to_vec(),
        };
        let (a2, n2) = self.norm2.forward(p, &c1, Some(&film));
        let h2 = silu_forward(&a2);
        let mut out = self.conv2.forward(p, &h2);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(p, x)),
            None => out.add_assign(x),
        }
        let cache = ResCache {
            x: x.clone(),
            n1,
            a1,
            h1,
            film,
            n2,
            a2,
            h2,
        };
        (out, cache)
    }

    fn backward(&self, p: &[f64], c: &ResCache, dy: &Tensor, emb: &[f64], demb: &mut [f64], g: &mut [f64]) -> Tensor {
        let dh2 = self.conv2.backward(p, &c.h2, dy, g);
        let da2 = silu_backward(&c.a2, &dh2);
        let (dc1, dfilm) = self.norm2.backward(p, &c.n2, Some(&c.film), &da2, g);
        let dfilm = dfilm.expect("film was applied");
        let dab: Vec<f64> = dfilm.scale.iter().chain(&dfilm.shift).copied().collect();
        let de = self.film.backward(p, emb, &dab, g);
        demb.iter_mut().zip(&de).for_each(|(a, b)| *a += b);
        let dh1 = self.conv1.backward(p, &c.h1, &dc1, g);
        let da1 = silu_backward(&c.a1, &dh1);
        let (mut dx, _) = self.norm1.backward(p, &c.n1, None, &da1, g);
        match &self.skip {
            Some(s) => dx.add_assign(&s.backward(p, &c.x, dy, g)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct EncStage {
    blocks: Vec<ResBlock>,
    down: Conv,
}

#[derive(Debug, Clone)]
struct DecStage {
    up: Conv,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Layout {
    freqs: Slot,
    mlp1: Dense,
    mlp2: Dense,
    input: Conv,
    enc: Vec<EncStage>,
    mid: [ResBlock; 2],
    attn: Attention,
    /// Ordered from the bottleneck outward.
    dec: Vec<DecStage>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

struct Builder<'a, 'r> {
    b: ParamBuilder<'r, ChaCha8Rng>,
    cfg: &'a NetConfig,
}

impl Builder<'_, '_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, zero: bool) -> Conv {
        let fan_in = cin * kernel * kernel;
        let init = if zero { Init::Const(0.0) } else { Init::Uniform { fan_in } };
        let weight = self.b.add(format!("{name}.weight"), vec![cout, cin, kernel, kernel], init, true);
        let bias = self.b.add(format!("{name}.bias"), vec![cout], Init::Const(0.0), true);
        Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let weight = self.b.add(format!("{name}.weight"), vec![dout, din], Init::Uniform { fan_in: din }, true);
        let bias = self.b.add(format!("{name}.bias"), vec![dout], Init::Const(0.0), true);
        Dense {
            weight,
            bias,
            din,
            dout,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> GroupNorm {
        let gamma = self.b.add(format!("{name}.gamma"), vec![channels], Init::Const(1.0), true);
        let beta = self.b.add(format!("{name}.beta"), vec![channels], Init::Const(0.0), true);
        GroupNorm {
            gamma,
            beta,
            channels,
            groups: self.cfg.groups_for(channels),
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        let emb = self.cfg.emb_dim;
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            film: self.dense(&format!("{name}.film"), emb, 2 * cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn blocks(&mut self, prefix: &str, cin: usize, cout: usize) -> Vec<ResBlock> {
        (0..self.cfg.n_res)
            .map(|b| self.resblock(&format!("{prefix}.block{b}"), if b == 0 { cin } else { cout }, cout))
            .collect()
    }
}

fn build(cfg: &NetConfig, seed: u64, zero_output: bool) -> Result<(Layout, Parameters)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bld = Builder {
        b: ParamBuilder::new(&mut rng),
        cfg,
    };
    let e = cfg.emb_dim;
    let freqs = bld
        .b
        .add("embed.freqs".into(), vec![e / 2], Init::Normal { std: 1.0 }, false);
    let mlp1 = bld.dense("embed.mlp1", e, e);
    let mlp2 = bld.dense("embed.mlp2", e, e);
    let input = bld.conv("input", cfg.in_channels, cfg.base_channels, 3, 1, false);

    let mut enc = Vec::new();
    let mut ch = cfg.base_channels;
    for l in 0..cfg.stages() {
        let c = cfg.stage_channels(l);
        let blocks = bld.blocks(&format!("enc{l}"), ch, c);
        let down = bld.conv(&format!("enc{l}.down"), c, c, 3, 2, false);
        enc.push(EncStage { blocks, down });
        ch = c;
    }

    let mid0 = bld.resblock("mid.block0", ch, ch);
    let attn = Attention {
        norm: bld.norm("mid.attn.norm", ch),
        qkv: bld.conv("mid.attn.qkv", ch, 3 * ch, 1, 1, false),
        proj: bld.conv("mid.attn.proj", ch, ch, 1, 1, false),
        heads: cfg.attention_heads(),
    };
    let mid1 = bld.resblock("mid.block1", ch, ch);

    let mut dec = Vec::new();
    for l in (0..cfg.stages()).rev() {
        let c = cfg.stage_channels(l);
        let up = bld.conv(&format!("dec{l}.up"), ch, c, 3, 1, false);
        let blocks = bld.blocks(&format!("dec{l}"), 2 * c, c);
        dec.push(DecStage { up, blocks });
        ch = c;
    }
    let out_norm = bld.norm("out.norm", ch);
    let out_conv = bld.conv("out.conv", ch, cfg.out_channels, 3, 1, zero_output);
    let params = bld.b.finish();
    let layout = Layout {
        freqs,
        mlp1,
        mlp2,
        input,
        enc,
        mid: [mid0, mid1],
        attn,
        dec,
        out_norm,
        out_conv,
    };
    Ok((layout, params))
}

/// Activations recorded by [`UNet::forward_recorded`] for one input.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    shape: (usize, usize, usize),
    emb_in: Vec<f64>,
    z1: Vec<f64>,
    e1: Vec<f64>,
    z2: Vec<f64>,
    emb: Vec<f64>,
    input: Tensor,
    enc: Vec<(Vec<ResCache>, Tensor)>,
    mid: [ResCache; 2],
    attn: AttnCache,
    dec: Vec<(Tensor, Vec<ResCache>)>,
    skip_channels: Vec<usize>,
    out_norm: NormCache,
    out_a: Tensor,
    out_h: Tensor,
}

/// The conditional denoiser network `F(x; c_noise)`.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: NetConfig,
    layout: Layout,
    params: Parameters,
}

fn silu_vec(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| super::ops::silu(v)).collect()
}

fn silu_vec_backward(z: &[f64], dy: &[f64]) -> Vec<f64> {
    let zt = Tensor::new(z.len(), 1, 1, z.to_vec()).expect("vector shape");
    let dt = Tensor::new(dy.len(), 1, 1, dy.to_vec()).expect("vector shape");
    silu_backward(&zt, &dt).data
}

impl UNet {
    /// Standard initialization with the output convolution zeroed, so the
    /// network output is identically zero.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let (layout, params) = build(&cfg, seed, true)?;
        Ok(UNet { cfg, layout, params })
    }

    /// Like [`UNet::new`] but with a randomly initialized output convolution.
    pub fn new_unzeroed(cfg: NetConfig, seed: u64) -> Result<Self> {
        let (layout, params) = build(&cfg, seed, false)?;
        Ok(UNet { cfg, layout, params })
    }

    /// Rebuild a network from stored parameters, matched by name and shape.
    pub fn from_parameters(cfg: NetConfig, stored: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut net = UNet::new(cfg, 0)?;
        if stored.len() != net.params.specs().len() {
            return Err(Error::Shape(format!(
                "{} stored tensors, network has {}",
                stored.len(),
                net.params.specs().len()
            )));
        }
        for (name, shape, data) in stored {
            net.params.set_tensor(name, shape, data)?;
        }
        Ok(net)
    }

    /// Number of parameters, trainable and frozen.
    pub fn parameter_count(cfg: &NetConfig) -> Result<usize> {
        Ok(build(cfg, 0, true)?.1.len())
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn embed_noise(&self, c_noise: f64) -> Vec<f64> {
        fourier_embed(c_noise, self.layout.freqs.of(self.params.values()))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels, x.channels
            )));
        }
        self.cfg.check_input_size(x.height, x.width)?;
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("network input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, c_noise: f64) -> Result<Tensor> {
        self.forward_recorded(x, c_noise).map(|(y, _)| y)
    }

    /// Forward pass that also returns the activations needed by [`UNet::backward`].
    pub fn forward_recorded(&self, x: &Tensor, c_noise: f64) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        if !c_noise.is_finite() {
            return Err(Error::Argument(format!("non-finite noise conditioning {c_noise}")));
        }
        let p = self.params.values();
        let ly = &self.layout;

        let emb_in = self.embed_noise(c_noise);
        let z1 = ly.mlp1.forward(p, &emb_in);
        let e1 = silu_vec(&z1);
        let z2 = ly.mlp2.forward(p, &e1);
        let emb = silu_vec(&z2);

        let mut h = ly.input.forward(p, x);
        let mut skips = Vec::new();
        let mut enc = Vec::new();
        for stage in &ly.enc {
            let mut caches = Vec::new();
            for b in &stage.blocks {
                let (y, c) = b.forward(p, &h, &emb);
                caches.push(c);
                h = y;
            }
            skips.push(h.clone());
            let pre_down = h;
            h = stage.down.forward(p, &pre_down);
            enc.push((caches, pre_down));
        }

        let (y, m0) = ly.mid[0].forward(p, &h, &emb);
        let (y, attn) = ly.attn.forward(p, &y);
        let (mut h, m1) = ly.mid[1].forward(p, &y, &emb);

        let mut dec = Vec::new();
        let mut skip_channels = Vec::new();
        for stage in &ly.dec {
            let up_in = upsample2x(&h);
            let upc = stage.up.forward(p, &up_in);
            let skip = skips.pop().expect("one skip per stage");
            skip_channels.push(skip.channels);
            h = Tensor::concat(&upc, &skip);
            let mut caches = Vec::new();
            for b in &stage.blocks {
                let (y, c) = b.forward(p, &h, &emb);
                caches.push(c);
                h = y;
            }
            dec.push((up_in, caches));
        }

        let (out_a, out_norm) = ly.out_norm.forward(p, &h, None);
        let out_h = silu_forward(&out_a);
        let out = ly.out_conv.forward(p, &out_h);
        let tape = Tape {
            version: self.params.version(),
            shape: (x.channels, x.height, x.width),
            emb_in,
            z1,
            e1,
            z2,
            emb,
            input: x.clone(),
            enc,
            mid: [m0, m1],
            attn,
            dec,
            skip_channels,
            out_norm,
            out_a,
            out_h,
        };
        Ok((out, tape))
    }

    /// Gradient of `<dy, F(x)>` with respect to every parameter, using the
    /// activations in `tape`. Frozen parameters get zero gradient.
    pub fn backward(&self, tape: &Tape, dy: &Tensor) -> Result<Vec<f64>> {
        if tape.version != self.params.version() {
            return Err(Error::State(format!(
                "activation record from parameter version {}, current version {}",
                tape.version,
                self.params.version()
            )));
        }
        let (_, h, w) = tape.shape;
        if (dy.channels, dy.height, dy.width) != (self.cfg.out_channels, h, w) {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}x{}, output is {}x{h}x{w}",
                dy.channels, dy.height, dy.width, self.cfg.out_channels
            )));
        }
        let p = self.params.values();
        let ly = &self.layout;
        let mut g = self.params.gradient_buffer();
        let mut demb = vec![0.0; self.cfg.emb_dim];

        let dh = ly.out_conv.backward(p, &tape.out_h, dy, &mut g);
        let da = silu_backward(&tape.out_a, &dh);
        let (mut dh, _) = ly.out_norm.backward(p, &tape.out_norm, None, &da, &mut g);

        let mut dskips = Vec::new();
        for ((stage, (up_in, caches)), &sc) in ly.dec.iter().zip(&tape.dec).zip(&tape.skip_channels).rev() {
            for (b, c) in stage.blocks.iter().zip(caches).rev() {
                dh = b.backward(p, c, &dh, &tape.emb, &mut demb, &mut g);
            }
            let (dupc, dskip) = dh.split(stage.up.cout);
            debug_assert_eq!(dskip.channels, sc);
            dskips.push(dskip);
            let dup_in = stage.up.backward(p, up_in, &dupc, &mut g);
            dh = upsample2x_backward(&dup_in);
        }

        dh = ly.mid[1].backward(p, &tape.mid[1], &dh, &tape.emb, &mut demb, &mut g);
        dh = ly.attn.backward(p, &tape.attn, &dh, &mut g);
        dh = ly.mid[0].backward(p, &tape.mid[0], &dh, &tape.emb, &mut demb, &mut g);

        for (stage, (caches, pre_down)) in ly.enc.iter().zip(&tape.enc).rev() {
            dh = stage.down.backward(p, pre_down, &dh, &mut g);
            dh.add_assign(&dskips.pop().expect("one skip gradient per stage"));
            for (b, c) in stage.blocks.iter().zip(caches).rev() {
                dh = b.backward(p, c, &dh, &tape.emb, &mut demb, &mut g);
            }
        }
        ly.input.backward(p, &tape.input, &dh, &mut g);

        let dz2 = silu_vec_backward(&tape.z2, &demb);
        let de1 = ly.mlp2.backward(p, &tape.e1, &dz2, &mut g);
        let dz1 = silu_vec_backward(&tape.z1, &de1);
        ly.mlp1.backward(p, &tape.emb_in, &dz1, &mut g);
        Ok(g)
    }

    /// Apply the network to field inputs: `scaled` (the preconditioned noisy
    /// state) and `cond` are concatenated channel-wise; the output carries the
    /// grid and channel names of `scaled`.
    pub fn apply_fields(&self, scaled: &Field, cond: &Field, c_noise: f64) -> Result<Field> {
        let x = fields_to_tensor(&[scaled, cond])?;
        let y = self.forward(&x, c_noise)?;
        tensor_to_field(&y, scaled.grid(), scaled.channels())
    }
}

/// Channel-wise concatenation of fields into a `C x H x W` tensor.
pub fn fields_to_tensor(parts: &[&Field]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("no fields to convert".into()))?;
    let g = first.grid();
    let hw = g.height * g.width;
    let mut data = Vec::new();
    let mut channels = 0;
    for f in parts {
        if f.grid() != g {
            return Err(Error::Shape("network inputs are on different grids".into()));
        }
        let nc = f.num_channels();
        for c in 0..nc {
            data.extend(f.data()[c..].iter().step_by(nc).take(hw));
        }
        channels += nc;
    }
    Tensor::new(channels, g.height, g.width, data)
}

pub fn tensor_to_field(t: &Tensor, grid: &Grid, channels: &[Channel]) -> Result<Field> {
    if (t.height, t.width, t.channels) != (grid.height, grid.width, channels.len()) {
        return Err(Error::Shape(format!(
            "{}x{}x{} tensor does not match a {}x{} grid with {} channels",
            t.channels,
            t.height,
            t.width,
            grid.height,
            grid.width,
            channels.len()
        )));
    }
    let hw = t.plane_len();
    let mut data = vec![0.0; t.data.len()];
    for c in 0..t.channels {
        for k in 0..hw {
            data[k * t.channels + c] = t.data[c * hw + k];
        }
    }
    Field::new(grid.clone(), channels.to_vec(), data)
}
