//! Split segmentors: an encoder `E_s` producing a bottleneck embedding plus
//! skip features, and a decoder `D_s` mapping them back to class logits.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fairseg_nn::layers::{Conv2d, ConvBlock};
use fairseg_nn::{Bound, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FairsegError, IoContext, Result};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Architecture of the reference U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Widths per resolution level; the last entry is the bottleneck width.
    /// The network downsamples `channels.len() - 1` times.
    pub channels: Vec<usize>,
}

impl UNetConfig {
    /// ~0.5M parameters at one input channel.
    pub fn standard(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            channels: vec![8, 16, 32, 64, 128],
        }
    }

    /// Smaller widths for CPU-bound experiments.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            channels: vec![4, 8, 16, 32, 64],
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn embedding_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Bottleneck spatial size for an `h x w` input.
    pub fn embedding_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.depth();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(FairsegError::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {f}",
                self.depth()
            )));
        }
        Ok((h / f, w / f))
    }

    fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(FairsegError::config("channels", "need at least two levels"));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(FairsegError::config("channels", "widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(FairsegError::config("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }
}

/// Bottleneck embedding `f` and the skip features routed around it.
#[derive(Debug, Clone)]
pub struct LatentEmbedding {
    pub tensor: Tensor,
    pub skips: Vec<Tensor>,
}

impl LatentEmbedding {
    pub fn batch_size(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Rows `start..start+len` of every tensor.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        Self {
            tensor: self.tensor.narrow_batch(start, len),
            skips: self.skips.iter().map(|s| s.narrow_batch(start, len)).collect(),
        }
    }

    /// Gather batch rows in `indices` order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let rows: Vec<Tensor> = indices.iter().map(|&i| t.narrow_batch(i, 1)).collect();
            Tensor::stack_batch(&rows.iter().collect::<Vec<_>>()).expect("same shapes")
        };
        Self {
            tensor: pick(&self.tensor),
            skips: self.skips.iter().map(pick).collect(),
        }
    }

    pub fn concat(parts: &[LatentEmbedding]) -> Self {
        let cat = |f: &dyn Fn(&LatentEmbedding) -> &Tensor| {
            Tensor::stack_batch(&parts.iter().map(f).collect::<Vec<_>>()).expect("same shapes")
        };
        let n_skips = parts[0].skips.len();
        Self {
            tensor: cat(&|p| &p.tensor),
            skips: (0..n_skips).map(|i| cat(&|p| &p.skips[i])).collect(),
        }
    }
}

/// Graph-side view of a [`LatentEmbedding`].
#[derive(Debug, Clone)]
pub struct LatentVars<'g> {
    pub tensor: Var<'g>,
    pub skips: Vec<Var<'g>>,
}

impl<'g> LatentVars<'g> {
    pub fn constant(g: &'g Graph, e: &LatentEmbedding) -> Self {
        Self {
            tensor: g.constant(e.tensor.clone()),
            skips: e.skips.iter().map(|s| g.constant(s.clone())).collect(),
        }
    }

    pub fn to_embedding(&self) -> LatentEmbedding {
        LatentEmbedding {
            tensor: (*self.tensor.value()).clone(),
            skips: self.skips.iter().map(|s| (*s.value()).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: ConvBlock,
    b: ConvBlock,
}

impl DoubleConv {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBlock::new(ps, &format!("{name}.0"), cin, cout, 1, rng),
            b: ConvBlock::new(ps, &format!("{name}.1"), cout, cout, 1, rng),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.b.forward(p, self.a.forward(p, x))
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    up: ConvBlock,
    fuse: DoubleConv,
}

/// Reference U-Net: max-pool downsampling, nearest upsampling + conv,
/// concatenated skips. Split at the deepest level.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    seed: u64,
    params: ParamSet,
    stem: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<UpStage>,
    head: Conv2d,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: UNetConfig,
    seed: u64,
    frozen: bool,
    sha256: String,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let ch = &config.channels;
        let stem = DoubleConv::new(&mut ps, "enc0", config.in_channels, ch[0], &mut rng);
        let downs = (1..ch.len())
            .map(|i| DoubleConv::new(&mut ps, &format!("enc{i}"), ch[i - 1], ch[i], &mut rng))
            .collect();
        let ups = (0..ch.len() - 1)
            .rev()
            .map(|i| UpStage {
                up: ConvBlock::new(&mut ps, &format!("dec{i}.up"), ch[i + 1], ch[i], 1, &mut rng),
                fuse: DoubleConv::new(&mut ps, &format!("dec{i}.fuse"), 2 * ch[i], ch[i], &mut rng),
            })
            .collect();
        let head = Conv2d::new(&mut ps, "head", ch[0], config.num_classes, 1, 1, &mut rng);
        Ok(Self {
            config,
            seed,
            params: ps,
            stem,
            downs,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters; errors once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.params.is_frozen() {
            return Err(FairsegError::Nn(fairseg_nn::NnError::Frozen(
                "segmentor is frozen".into(),
            )));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Freeze every parameter; returns the parameter hash.
    pub fn freeze(&mut self) -> String {
        self.params.freeze();
        self.params.sha256_hex()
    }

    pub fn param_hash(&self) -> String {
        self.params.sha256_hex()
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1] != self.config.in_channels {
            return Err(FairsegError::Shape(format!(
                "expected [B, {}, H, W], got {x:?}",
                self.config.in_channels
            )));
        }
        self.config.embedding_spatial(x[2], x[3]).map(|_| ())
    }

    /// `E_s`: image batch to bottleneck embedding and skips.
    pub fn encode<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<LatentVars<'g>> {
        self.check_input(&x.shape())?;
        let mut h = self.stem.forward(p, x);
        let mut skips = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            skips.push(h);
            h = down.forward(p, h.max_pool2());
        }
        Ok(LatentVars { tensor: h, skips })
    }

    /// `D_s`: embedding and skips to logits `[B, L, H, W]`.
    pub fn decode<'g>(&self, p: &Bound<'g>, latent: &LatentVars<'g>) -> Result<Var<'g>> {
        let emb = latent.tensor.shape();
        if emb.len() != 4 || emb[1] != self.config.embedding_channels() {
            return Err(FairsegError::Shape(format!(
                "embedding must have {} channels, got {emb:?}",
                self.config.embedding_channels()
            )));
        }
        if latent.skips.len() != self.ups.len() {
            return Err(FairsegError::Shape(format!(
                "expected {} skip tensors, got {}",
                self.ups.len(),
                latent.skips.len()
            )));
        }
        let mut h = latent.tensor;
        for (stage, skip) in self.ups.iter().zip(latent.skips.iter().rev()) {
            let up = stage.up.forward(p, h.upsample_nearest2());
            h = stage.fuse.forward(p, skip.concat_channels(up));
        }
        Ok(self.head.forward(p, h))
    }

    /// Unsplit network.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.check_input(&x.shape())?;
        let mut h = self.stem.forward(p, x);
        let mut skips = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            skips.push(h);
            h = down.forward(p, h.max_pool2());
        }
        for stage in &self.ups {
            let up = stage.up.forward(p, h.upsample_nearest2());
            h = stage.fuse.forward(p, skips.pop().expect("one skip per level").concat_channels(up));
        }
        Ok(self.head.forward(p, h))
    }

    /// Embeddings of `images` (no gradients).
    pub fn embed(&self, images: &Tensor) -> Result<LatentEmbedding> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        Ok(self.encode(&p, g.constant(images.clone()))?.to_embedding())
    }

    /// Logits for an embedding (no gradients).
    pub fn decode_embedding(&self, e: &LatentEmbedding) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let logits = self.decode(&p, &LatentVars::constant(&g, e))?;
        Ok((*logits.value()).clone())
    }

    /// Logits of the unsplit network (no gradients).
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(images.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Write `params.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(PARAMS_FILE);
        let file = File::create(&path).at(&path)?;
        self.params.write_archive(BufWriter::new(file))?;
        let manifest = Manifest {
            architecture: self.config.clone(),
            seed: self.seed,
            frozen: self.is_frozen(),
            sha256: self.param_hash(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
        Ok(())
    }

    /// Load a checkpoint written by [`UNet::save`], verifying its hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let params_path = dir.join(PARAMS_FILE);
        if !manifest_path.exists() || !params_path.exists() {
            return Err(FairsegError::MissingCheckpoint {
                path: dir.to_path_buf(),
                hint: "train a baseline first (`fairseg train --kind baseline`)".into(),
            });
        }
        let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut net = Self::new(manifest.architecture, manifest.seed)?;
        let file = File::open(&params_path).at(&params_path)?;
        net.params.load_archive(BufReader::new(file))?;
        if net.param_hash() != manifest.sha256 {
            return Err(FairsegError::Load(format!(
                "{}: parameter hash does not match manifest",
                dir.display()
            )));
        }
        if manifest.frozen {
            net.freeze();
        }
        Ok(net)
    }
}
