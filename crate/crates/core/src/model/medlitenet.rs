//! The full encoder, bottleneck and decoder network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Conv2dSpec, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, DOWNSAMPLE};
use crate::nn::{
    AsppModule, BoundaryAttention, Conv2d, ConvBn, Ctx, DecoderStage, FusionBlock, GlobalEncoder,
    MBConvBlock,
};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Module names of the parameter breakdown, in forward order.
pub const MODULES: [&str; 12] = [
    "stem",
    "stage1",
    "stage2",
    "stage3",
    "stage4",
    "baa_enc",
    "transformer",
    "fusion",
    "aspp",
    "decoder",
    "baa_dec",
    "head",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.modules.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Stem plus the four MBConv stages.
    pub fn encoder(&self) -> usize {
        MODULES[..5].iter().filter_map(|m| self.get(m)).sum()
    }
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    /// Stem output then stages 1 to 4, at H/2 down to H/32.
    pub encoder: Vec<Var>,
    pub transformer: Var,
    pub bottleneck: Var,
    pub decoder: Var,
    pub logits: Var,
    pub prob: Var,
}

#[derive(Clone, Debug)]
pub struct MedLiteNet<T: Float = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: ConvBn,
    pub stages: Vec<Vec<MBConvBlock>>,
    pub transformer: GlobalEncoder,
    pub baa_enc: BoundaryAttention,
    pub fusion: FusionBlock,
    pub aspp: AsppModule,
    pub decoder: Vec<DecoderStage>,
    pub baa_dec: BoundaryAttention,
    pub head: Conv2d,
}

impl<T: Float> MedLiteNet<T> {
    /// Builds the network with weights drawn deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = cfg.stage_widths();
        let stem = ConvBn::new(
            &mut store,
            "stem",
            Conv2dSpec::new(cfg.in_channels, widths[0], 3).stride(2),
            Some(Activation::Silu),
            &mut rng,
        )?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (s, (&w, &n)) in widths.iter().zip(&cfg.blocks).enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("stage{}.{b}", s + 1);
                blocks.push(MBConvBlock::new(&mut store, &name, cin, w, cfg.expansion, stride, &mut rng)?);
                cin = w;
            }
            stages.push(blocks);
        }
        let d = cfg.transformer_dim;
        let transformer = GlobalEncoder::new(
            &mut store,
            "transformer",
            widths[3],
            d,
            cfg.transformer_layers,
            cfg.heads,
            cfg.ffn_mult,
            &mut rng,
        )?;
        let baa_enc = BoundaryAttention::new(&mut store, "baa_enc", widths[3], Some(d), &mut rng)?;
        let fusion = FusionBlock::new(&mut store, "fusion", widths[3], d, d, &mut rng)?;
        let aspp = AsppModule::new(
            &mut store,
            "aspp",
            d,
            &cfg.aspp_rates,
            cfg.aspp_branch_channels,
            cfg.aspp_out_channels,
            &mut rng,
        )?;
        let skips = [widths[2], widths[1], widths[0], widths[0]];
        let mut decoder = Vec::with_capacity(4);
        let mut cin = cfg.aspp_out_channels;
        for (i, (&skip, &out)) in skips.iter().zip(&cfg.decoder_widths).enumerate() {
            decoder.push(DecoderStage::new(
                &mut store,
                &format!("decoder.{i}"),
                cin,
                skip,
                out,
                cfg.scse_reduction,
                &mut rng,
            )?);
            cin = out;
        }
        let baa_dec = BoundaryAttention::new(&mut store, "baa_dec", cin, None, &mut rng)?;
        let head = Conv2d::new(&mut store, "head", Conv2dSpec::new(cin, 1, 1).with_bias(), &mut rng)?;
        Ok(Self {
            config: cfg,
            store,
            stem,
            stages,
            transformer,
            baa_enc,
            fusion,
            aspp,
            decoder,
            baa_dec,
            head,
        })
    }

    /// Same architecture with every stored tensor converted to `U`.
    pub fn cast<U: Float>(&self) -> MedLiteNet<U> {
        MedLiteNet {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            transformer: self.transformer.clone(),
            baa_enc: self.baa_enc.clone(),
            fusion: self.fusion.clone(),
            aspp: self.aspp.clone(),
            decoder: self.decoder.clone(),
            baa_dec: self.baa_dec.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, c, h, w] if c == self.config.in_channels => {
                if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
                    Err(Error::Shape(format!(
                        "input height and width must be positive multiples of {DOWNSAMPLE}, got {h}x{w}"
                    )))
                } else {
                    Ok(())
                }
            }
            s => Err(Error::Shape(format!(
                "expected input [N, {}, H, W], got {s:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Records the forward pass with parameters taken from `store` (which
    /// must share this model's layout) and returns every stage output.
    pub fn forward_features_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Features> {
        self.check_input(g.shape(x))?;
        let cx = Ctx::new(store, mode);
        let h = g.shape(x)[2];
        let mut encoder = Vec::with_capacity(5);
        let mut y = self.stem.forward(g, &cx, x)?;
        encoder.push(y);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, &cx, y)?;
            }
            encoder.push(y);
        }
        let widths = self.config.stage_widths();
        let skip_channels = [widths[0], widths[0], widths[1], widths[2], widths[3]];
        for (k, (&f, &c)) in encoder.iter().zip(&skip_channels).enumerate() {
            let s = g.shape(f);
            if s[1] != c || s[2] != h >> (k + 1) {
                return Err(Error::Shape(format!(
                    "encoder level {k} produced {s:?}, expected {c} channels at {}",
                    h >> (k + 1)
                )));
            }
        }
        let bottom = encoder[4];
        let trans = self.transformer.forward(g, &cx, bottom)?;
        let refined = self.baa_enc.forward(g, &cx, bottom, Some(trans))?;
        let fused = self.fusion.forward(g, &cx, refined, trans)?;
        let mut y = self.aspp.forward(g, &cx, fused)?;
        let bottleneck = y;
        for (stage, &skip) in self.decoder.iter().zip(encoder[..4].iter().rev()) {
            y = stage.forward(g, &cx, y, skip)?;
        }
        let y = self.baa_dec.forward(g, &cx, y, None)?;
        let head = self.head.forward(g, &cx, y)?;
        let logits = g.upsample_bilinear2x(head)?;
        let prob = g.sigmoid(logits);
        Ok(Features {
            encoder,
            transformer: trans,
            bottleneck,
            decoder: y,
            logits,
            prob,
        })
    }

    /// Probability map `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_features_with(g, &self.store, x, mode)?.prob)
    }

    /// Eval-mode probabilities for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(&self.store, images)
    }

    pub fn predict_with(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let p = self.forward_features_with(&mut g, store, x, Mode::Eval)?.prob;
        Ok(g.value(p).clone())
    }

    /// Trainable counts per module, read from the parameter store.
    pub fn count_parameters(&self) -> ParamBreakdown {
        let modules: Vec<(String, usize)> = MODULES
            .iter()
            .map(|m| (m.to_string(), self.store.trainable_count_prefixed(&format!("{m}."))))
            .collect();
        let total = self.store.trainable_count();
        ParamBreakdown { modules, total }
    }

    /// Trainable counts per module from each block's closed form.
    pub fn analytic_parameters(&self) -> ParamBreakdown {
        let stage = |i: usize| self.stages[i].iter().map(MBConvBlock::param_count).sum::<usize>();
        let counts = [
            self.stem.param_count(),
            stage(0),
            stage(1),
            stage(2),
            stage(3),
            self.baa_enc.param_count(),
            self.transformer.param_count(),
            self.fusion.param_count(),
            self.aspp.param_count(),
            self.decoder.iter().map(DecoderStage::param_count).sum(),
            self.baa_dec.param_count(),
            self.head.param_count(),
        ];
        ParamBreakdown {
            modules: MODULES.iter().zip(counts).map(|(m, c)| (m.to_string(), c)).collect(),
            total: counts.iter().sum(),
        }
    }
}

/// Binary mask: 1 where `prob >= threshold` (ties go to the foreground).
pub fn predict_mask<T: Float>(prob: &Tensor<T>, threshold: T) -> Tensor<T> {
    prob.map(|p| if p >= threshold { T::one() } else { T::zero() })
}
