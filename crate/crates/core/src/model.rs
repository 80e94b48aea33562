//! Model configuration, the end-to-end forward pass, and module ablation.

use serde::{Deserialize, Serialize};

use crate::correspondence::{self, CorrespondencePair, Stream};
use crate::decompose::{decompose, DecomposeConfig};
use crate::encoders::{self, FeatureMap};
use crate::error::{contract, Error, Result};
use crate::flow::{self, DecodeOutput, FlowField, FlowPyramid, PYRAMID_SCALES};
use crate::image::Image;
use crate::nn;
use crate::params::{ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Which of the four encoder/correspondence modules are active. A disabled
/// module is replaced by average pooling plus a 1×1 projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub gsce: bool,
    pub lfe: bool,
    pub gcce: bool,
    pub lcce: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            gsce: true,
            lfe: true,
            gcce: true,
            lcce: true,
        }
    }

    /// Base-layer transformer only, no correspondence modules.
    pub fn gsce_only() -> Self {
        Self {
            gsce: true,
            lfe: false,
            gcce: false,
            lcce: false,
        }
    }

    /// Both self-correlation encoders, no correspondence modules.
    pub fn encoders_only() -> Self {
        Self {
            gsce: true,
            lfe: true,
            gcce: false,
            lcce: false,
        }
    }

    /// Disables modules by name (`gsce`, `lfe`, `gcce`, `lcce`).
    pub fn without(mut self, names: &[impl AsRef<str>]) -> Result<Self> {
        for n in names {
            match n.as_ref() {
                "gsce" => self.gsce = false,
                "lfe" => self.lfe = false,
                "gcce" => self.gcce = false,
                "lcce" => self.lcce = false,
                other => return Err(Error::Contract(format!("unknown module `{other}`"))),
            }
        }
        Ok(self)
    }
}

/// Network hyperparameters. Channel counts are the full-scale ladder
/// divided by `divisor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub divisor: usize,
    pub heads: usize,
    pub gsce_ratios: [Vec<usize>; 2],
    pub gcce_ratios: [Vec<usize>; 2],
    pub decompose: DecomposeConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            divisor: 1,
            heads: 4,
            gsce_ratios: [vec![12, 16, 20, 24], vec![6, 8, 10, 12]],
            gcce_ratios: [vec![3, 4, 5, 6], vec![1, 2, 3, 4]],
            decompose: DecomposeConfig::default(),
            ablation: Ablation::full(),
        }
    }
}

impl ModelConfig {
    /// Reduced-width configuration with two attention heads.
    pub fn toy(divisor: usize) -> Self {
        Self {
            divisor,
            heads: 2,
            ..Self::default()
        }
    }

    /// Encoder channels at 1/4 and 1/8.
    pub fn stage_dims(&self) -> [usize; 2] {
        [48 / self.divisor, 96 / self.divisor]
    }

    /// Correspondence channels at 1/16 and 1/32.
    pub fn corr_dims(&self) -> [usize; 2] {
        [192 / self.divisor, 384 / self.divisor]
    }

    pub fn frb_hidden(&self) -> usize {
        64 / self.divisor
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.divisor >= 1 && 48 % self.divisor == 0 && 64 % self.divisor == 0,
            "channel divisor {} must divide 48 and 64",
            self.divisor
        );
        for c in self.stage_dims().into_iter().chain(self.corr_dims()) {
            contract!(
                self.heads >= 1 && c % self.heads == 0,
                "{c} channels not divisible by {} heads",
                self.heads
            );
        }
        for r in self.gsce_ratios.iter().chain(&self.gcce_ratios) {
            contract!(!r.is_empty() && r.iter().all(|&v| v >= 1), "pooling ratios must be positive");
        }
        contract!(
            self.ablation.lfe || self.ablation.gsce,
            "at least one of lfe/gsce must be enabled"
        );
        contract!(self.decompose.radius >= 1 && self.decompose.eps > 0.0, "invalid decomposition parameters");
        Ok(())
    }
}

/// Detail and base layers of both modalities, ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub hf_v: Tensor,
    pub lf_v: Tensor,
    pub hf_t: Tensor,
    pub lf_t: Tensor,
}

impl Prepared {
    pub fn new(visible: &Image, thermal: &Image, cfg: &DecomposeConfig) -> Result<Self> {
        contract!(
            visible.tensor().shape() == thermal.tensor().shape(),
            "visible {:?} and thermal {:?} differ in size",
            visible.tensor().shape(),
            thermal.tensor().shape()
        );
        let v = decompose(visible, cfg)?;
        let t = decompose(thermal, cfg)?;
        Ok(Self {
            hf_v: v.hf,
            lf_v: v.lf.into_tensor(),
            hf_t: t.hf,
            lf_t: t.lf.into_tensor(),
        })
    }

    pub fn height(&self) -> usize {
        self.hf_v.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.hf_v.shape()[2]
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub f_v: FeatureMap,
    pub f_t: FeatureMap,
    pub phi_v: FeatureMap,
    pub phi_t: FeatureMap,
    pub hf_pair: CorrespondencePair,
    pub lf_pair: CorrespondencePair,
    pub decode: DecodeOutput,
}

/// Detail encoder or its pass-through.
fn detail_stream(s: &mut Session, cfg: &ModelConfig, hf: Var) -> Result<(Option<FeatureMap>, FeatureMap)> {
    if cfg.ablation.lfe {
        let f = encoders::lfe_forward(s, cfg, hf)?;
        Ok((Some(f.quarter), f.eighth))
    } else {
        encoders::check_input(s, hf, "lfe")?;
        let var = nn::pass_through(s, "lfe.skip", hf, cfg.stage_dims()[1], 8)?;
        Ok((None, FeatureMap { var, scale: 8 }))
    }
}

fn base_stream(
    s: &mut Session,
    cfg: &ModelConfig,
    lf: Var,
    quarter: Option<FeatureMap>,
    eighth: FeatureMap,
) -> Result<FeatureMap> {
    if cfg.ablation.gsce {
        let inf8 = cfg.ablation.lfe.then_some(eighth);
        encoders::gsce_forward(s, cfg, lf, [quarter, inf8])
    } else {
        encoders::check_input(s, lf, "gsce")?;
        let var = nn::pass_through(s, "gsce.skip", lf, cfg.stage_dims()[1], 8)?;
        Ok(FeatureMap { var, scale: 8 })
    }
}

fn skip_pair(s: &mut Session, name: &str, a: Var, b: Var, cout: usize, stream: Stream) -> Result<CorrespondencePair> {
    let (ab, ba) = (s.g.concat(&[a, b])?, s.g.concat(&[b, a])?);
    let v = nn::pass_through(s, name, ab, cout, 4)?;
    let t = nn::pass_through(s, name, ba, cout, 4)?;
    Ok(CorrespondencePair {
        v_to_t: FeatureMap { var: v, scale: 32 },
        t_to_v: FeatureMap { var: t, scale: 32 },
        stream,
    })
}

/// The whole network on prepared inputs, with ablation applied.
pub fn forward(s: &mut Session, cfg: &ModelConfig, x: &Prepared) -> Result<ForwardOutput> {
    cfg.validate()?;
    let hf_v = s.g.constant(x.hf_v.clone());
    let lf_v = s.g.constant(x.lf_v.clone());
    let hf_t = s.g.constant(x.hf_t.clone());
    let lf_t = s.g.constant(x.lf_t.clone());
    let (q_v, f_v) = detail_stream(s, cfg, hf_v)?;
    let (q_t, f_t) = detail_stream(s, cfg, hf_t)?;
    let phi_v = base_stream(s, cfg, lf_v, q_v, f_v)?;
    let phi_t = base_stream(s, cfg, lf_t, q_t, f_t)?;
    let d2 = cfg.corr_dims()[1];
    let lcce = if cfg.ablation.lcce {
        Some(correspondence::lcce_forward(s, cfg, f_v, f_t)?)
    } else {
        None
    };
    let hf_pair = match &lcce {
        Some(l) => l.pair,
        None => skip_pair(s, "lcce.skip", f_v.var, f_t.var, d2, Stream::Hf)?,
    };
    let lf_pair = if cfg.ablation.gcce {
        correspondence::gcce_forward(s, cfg, phi_v, phi_t, f_v, f_t, lcce.as_ref())?
    } else {
        let u = s.g.concat(&[phi_v.var, f_v.var])?;
        let v = s.g.concat(&[phi_t.var, f_t.var])?;
        let pu = nn::pass_through(s, "gcce.skip", u, d2, 4)?;
        let pv = nn::pass_through(s, "gcce.skip", v, d2, 4)?;
        CorrespondencePair {
            v_to_t: FeatureMap { var: pu, scale: 32 },
            t_to_v: FeatureMap { var: pv, scale: 32 },
            stream: Stream::Lf,
        }
    };
    let decode = flow::decode(s, cfg, &hf_pair, &lf_pair)?;
    Ok(ForwardOutput {
        f_v,
        f_t,
        phi_v,
        phi_t,
        hf_pair,
        lf_pair,
        decode,
    })
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Seeded initialization; parameters are created by a dry forward pass.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Session::init(seed);
        let z = Tensor::zeros(&[3, 32, 32]);
        let x = Prepared {
            hf_v: z.clone(),
            lf_v: z.clone(),
            hf_t: z.clone(),
            lf_t: z,
        };
        forward(&mut s, &config, &x)?;
        let params = s.into_store().expect("init session");
        Ok(Self { config, params })
    }

    /// Checks that the weights match the configuration exactly, naming the
    /// first offending tensor.
    pub fn check_schema(&self) -> Result<()> {
        let reference = Model::new(self.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match self.params.get(name) {
                None => return Err(Error::Schema(format!("checkpoint lacks tensor `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Schema(format!(
                        "tensor `{name}` has shape {:?}, configuration expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.names().into_iter().find(|n| reference.params.get(n).is_none()) {
            return Err(Error::Schema(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        self.params.save(path, &meta)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Schema(format!("checkpoint configuration: {e}")))?;
        let model = Self { config, params };
        model.check_schema()?;
        Ok(model)
    }

    /// Flow pyramid for inputs whose sides are multiples of 32.
    pub fn predict_prepared(&self, x: &Prepared) -> Result<FlowPyramid> {
        let mut s = Session::new(&self.params, false);
        let out = forward(&mut s, &self.config, x)?;
        let levels = out
            .decode
            .levels
            .iter()
            .zip(PYRAMID_SCALES)
            .map(|(&v, scale)| FlowField::new(s.g.value(v).clone(), scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowPyramid { levels })
    }

    /// Full-resolution flow on the thermal grid pointing into the visible
    /// image. Inputs of any size are edge-padded to multiples of 32 and the
    /// flow is cropped back.
    pub fn register(&self, visible: &Image, thermal: &Image) -> Result<FlowField> {
        let (h, w) = (visible.height(), visible.width());
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        let x = Prepared::new(&pad_edge(visible, ph, pw)?, &pad_edge(thermal, ph, pw)?, &self.config.decompose)?;
        let pyr = self.predict_prepared(&x)?;
        let full = &pyr.finest().data;
        let cropped = Tensor::from_fn(&[2, h, w], |i| {
            let (c, y, xx) = (i / (h * w), (i / w) % h, i % w);
            full.at(&[c, y, xx])
        });
        FlowField::new(cropped, 1)
    }
}

/// Pads an image to `h×w` by repeating its last row and column.
pub fn pad_edge(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (ih, iw) = (img.height(), img.width());
    contract!(h >= ih && w >= iw, "cannot pad {ih}x{iw} down to {h}x{w}");
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.tensor().at(&[c, y.min(ih - 1), x.min(iw - 1)])
    });
    Image::new(t, img.modality())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Modality;

    #[test]
    fn default_config_is_valid_and_toy_heads_divide() {
        ModelConfig::default().validate().unwrap();
        for d in [1, 2, 4, 8] {
            ModelConfig::toy(d).validate().unwrap();
        }
        assert!(ModelConfig { divisor: 8, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::toy(3).validate().is_err());
    }

    #[test]
    fn encoder_stream_without_any_module_is_rejected() {
        let mut cfg = ModelConfig::toy(8);
        cfg.ablation = Ablation::full().without(&["lfe", "gsce"]).unwrap();
        assert!(cfg.validate().is_err());
        cfg.ablation = Ablation::full().without(&["lcce", "gcce"]).unwrap();
        cfg.validate().unwrap();
        assert!(Ablation::full().without(&["nope"]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_schema_checks_pass() {
        let a = Model::new(ModelConfig::toy(8), 5).unwrap();
        let b = Model::new(ModelConfig::toy(8), 5).unwrap();
        assert_eq!(a, b);
        a.check_schema().unwrap();
    }

    #[test]
    fn schema_mismatch_names_the_tensor() {
        let mut m = Model::new(ModelConfig::toy(8), 1).unwrap();
        m.params.insert("frb0.c1.w", Tensor::zeros(&[1, 2, 3, 3]));
        let err = m.check_schema().unwrap_err();
        assert!(matches!(&err, Error::Schema(msg) if msg.contains("frb0.c1.w")), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let m = Model::new(ModelConfig::toy(8), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
    }

    #[test]
    fn register_handles_sizes_not_divisible_by_32() {
        let m = Model::new(ModelConfig::toy(8), 3).unwrap();
        let v = Image::constant(40, 50, 0.3, Modality::Visible);
        let t = Image::constant(40, 50, 0.6, Modality::Thermal);
        let f = m.register(&v, &t).unwrap();
        assert_eq!((f.height(), f.width()), (40, 50));
    }

    #[test]
    fn every_ablation_variant_keeps_output_shapes() {
        let (v, t) = crate::synth::procedural_pair(128, 160, 0).unwrap();
        let variants = [
            Ablation::full(),
            Ablation::gsce_only(),
            Ablation::encoders_only(),
            Ablation::full().without(&["gsce"]).unwrap(),
            Ablation::full().without(&["lfe"]).unwrap(),
            Ablation::full().without(&["gcce"]).unwrap(),
            Ablation::full().without(&["lcce"]).unwrap(),
        ];
        for ablation in variants {
            let cfg = ModelConfig { ablation, ..ModelConfig::toy(8) };
            let m = Model::new(cfg.clone(), 0).unwrap();
            let x = Prepared::new(&v, &t, &cfg.decompose).unwrap();
            let pyr = m.predict_prepared(&x).unwrap();
            assert_eq!(pyr.scales(), PYRAMID_SCALES.to_vec(), "{ablation:?}");
            assert_eq!(pyr.finest().data.shape(), &[2, 128, 160], "{ablation:?}");
        }
    }
}
