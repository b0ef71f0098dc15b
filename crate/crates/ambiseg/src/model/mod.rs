//! The conditional denoiser: a small diffusion UNet conditioned on the
//! image by channel concatenation, with residual blocks, group
//! normalization, SiLU activations and a sinusoidal timestep embedding.
//!
//! The resolution stack follows the more-blocks-when-downscaled principle:
//! per-resolution channel widths and block counts come from the config,
//! downsampling is a stride-2 convolution and upsampling is
//! nearest-neighbor followed by a 3x3 convolution.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Prediction, PredictionKind};
use crate::error::{Error, Result};
use crate::tensor::nn::{
    add_channel_bias, concat_channels, conv2d, group_norm, linear, silu, upsample_nearest_2x,
};
use crate::tensor::optim::ParamMap;
use crate::tensor::{Element, Tensor};

pub mod checkpoint;
pub mod train;

pub use train::{train, LossRow, TrainOptions};

/// Group count used by every normalization layer: min(32, C), and C must
/// divide evenly.
pub fn group_count(channels: usize) -> usize {
    channels.min(32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channel width per resolution, outermost first.
    pub channels: Vec<usize>,
    /// Residual blocks per resolution (encoder and decoder alike).
    pub num_res_blocks: Vec<usize>,
    /// Residual blocks between encoder and decoder.
    pub middle_blocks: usize,
    pub prediction_kind: PredictionKind,
    pub time_embed_dim: usize,
    /// Attention hook; the layers themselves are not implemented and the
    /// flag must stay false.
    pub use_attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: vec![16, 32, 64],
            num_res_blocks: vec![1, 2, 2],
            middle_blocks: 2,
            prediction_kind: PredictionKind::X0,
            time_embed_dim: 64,
            use_attention: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("channels must not be empty".into()));
        }
        if self.channels.len() != self.num_res_blocks.len() {
            return Err(Error::Config(format!(
                "{} channel entries but {} block counts",
                self.channels.len(),
                self.num_res_blocks.len()
            )));
        }
        for &c in &self.channels {
            for width in [c, 2 * c] {
                let g = group_count(width);
                if width % g != 0 {
                    return Err(Error::Config(format!(
                        "channel width {width} not divisible by its group count {g}"
                    )));
                }
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.use_attention {
            return Err(Error::Config(
                "attention layers are not implemented; use_attention must stay false".into(),
            ));
        }
        Ok(())
    }

    /// Required divisor of the spatial dimensions.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Sinusoidal features of t at geometrically spaced frequencies,
/// one row per batch element. At t = 0 the sin half is all zeros and the
/// cos half all ones.
pub fn timestep_features(t: &[f64], dim: usize) -> Result<Tensor<f32>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "timestep embedding dim must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let denom = (half.saturating_sub(1)).max(1) as f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let scaled = tv * 1000.0;
        for k in 0..half {
            let freq = 10_000f64.powf(-(k as f64) / denom);
            data.push((scaled * freq).sin() as f32);
        }
        for k in 0..half {
            let freq = 10_000f64.powf(-(k as f64) / denom);
            data.push((scaled * freq).cos() as f32);
        }
    }
    Tensor::from_vec(&[t.len(), dim], data)
}

#[derive(Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamMap<f32>,
}

impl DenoiserModel {
    /// Kaiming fan-in initialization for convolutions and linear maps,
    /// unit/zero affine parameters for normalization, and a zero-initialized
    /// output convolution so the untrained model predicts all zeros.
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamMap::new();
        let d = config.time_embed_dim;

        let mut conv = |params: &mut ParamMap<f32>,
                        rng: &mut ChaCha12Rng,
                        name: &str,
                        out_c: usize,
                        in_c: usize,
                        k: usize|
         -> Result<()> {
            let fan_in = in_c * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..out_c * in_c * k * k)
                .map(|_| (f64::sample_standard_normal(rng) * std) as f32)
                .collect();
            params.insert(
                format!("{name}.weight"),
                Tensor::param(&[out_c, in_c, k, k], data)?,
            );
            params.insert(
                format!("{name}.bias"),
                Tensor::param(&[out_c], vec![0.0; out_c])?,
            );
            Ok(())
        };
        let mut linear_init = |params: &mut ParamMap<f32>,
                               rng: &mut ChaCha12Rng,
                               name: &str,
                               out_d: usize,
                               in_d: usize|
         -> Result<()> {
            let std = (2.0 / in_d as f64).sqrt();
            let data = (0..out_d * in_d)
                .map(|_| (f64::sample_standard_normal(rng) * std) as f32)
                .collect();
            params.insert(format!("{name}.weight"), Tensor::param(&[out_d, in_d], data)?);
            params.insert(
                format!("{name}.bias"),
                Tensor::param(&[out_d], vec![0.0; out_d])?,
            );
            Ok(())
        };
        let norm = |params: &mut ParamMap<f32>, name: &str, c: usize| -> Result<()> {
            params.insert(format!("{name}.scale"), Tensor::param(&[c], vec![1.0; c])?);
            params.insert(format!("{name}.shift"), Tensor::param(&[c], vec![0.0; c])?);
            Ok(())
        };
        let mut res_block = |params: &mut ParamMap<f32>,
                             rng: &mut ChaCha12Rng,
                             prefix: &str,
                             in_c: usize,
                             out_c: usize|
         -> Result<()> {
            norm(params, &format!("{prefix}.gn1"), in_c)?;
            conv(params, rng, &format!("{prefix}.conv1"), out_c, in_c, 3)?;
            linear_init(params, rng, &format!("{prefix}.temb_proj"), out_c, d)?;
            norm(params, &format!("{prefix}.gn2"), out_c)?;
            conv(params, rng, &format!("{prefix}.conv2"), out_c, out_c, 3)?;
            if in_c != out_c {
                conv(params, rng, &format!("{prefix}.skip"), out_c, in_c, 1)?;
            }
            Ok(())
        };

        linear_init(&mut params, rng, "temb.mlp1", d, d)?;
        linear_init(&mut params, rng, "temb.mlp2", d, d)?;

        let ch = &config.channels;
        let levels = ch.len();
        conv(&mut params, rng, "stem", ch[0], 2, 3)?;
        for l in 0..levels {
            for b in 0..config.num_res_blocks[l] {
                res_block(&mut params, rng, &format!("enc.{l}.{b}"), ch[l], ch[l])?;
            }
            if l + 1 < levels {
                conv(&mut params, rng, &format!("down.{l}"), ch[l + 1], ch[l], 3)?;
            }
        }
        for b in 0..config.middle_blocks {
            let c = ch[levels - 1];
            res_block(&mut params, rng, &format!("mid.{b}"), c, c)?;
        }
        for l in (0..levels).rev() {
            for b in 0..config.num_res_blocks[l] {
                res_block(&mut params, rng, &format!("dec.{l}.{b}"), 2 * ch[l], ch[l])?;
            }
            if l > 0 {
                conv(&mut params, rng, &format!("up.{l}"), ch[l - 1], ch[l], 3)?;
            }
        }
        norm(&mut params, "out.gn", ch[0])?;
        // Zero output head: the freshly initialized model predicts zeros.
        params.insert(
            "out.conv.weight".to_string(),
            Tensor::param(&[1, ch[0], 3, 3], vec![0.0; ch[0] * 9])?,
        );
        params.insert("out.conv.bias".to_string(), Tensor::param(&[1], vec![0.0])?);

        Ok(DenoiserModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.zero_grad();
        }
    }

    fn p(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    fn res_block(
        &self,
        prefix: &str,
        h: &Tensor<f32>,
        temb: &Tensor<f32>,
        in_c: usize,
        out_c: usize,
    ) -> Result<Tensor<f32>> {
        let g1 = group_norm(
            h,
            group_count(in_c),
            self.p(&format!("{prefix}.gn1.scale"))?,
            self.p(&format!("{prefix}.gn1.shift"))?,
        )?;
        let c1 = conv2d(
            &silu(&g1),
            self.p(&format!("{prefix}.conv1.weight"))?,
            self.p(&format!("{prefix}.conv1.bias"))?,
            1,
        )?;
        let g2 = group_norm(
            &c1,
            group_count(out_c),
            self.p(&format!("{prefix}.gn2.scale"))?,
            self.p(&format!("{prefix}.gn2.shift"))?,
        )?;
        // The embedding bias goes in after the normalization: at these
        // widths the groups hold a single channel, so a bias added before
        // the norm would be subtracted out with the group mean.
        let tproj = linear(
            temb,
            self.p(&format!("{prefix}.temb_proj.weight"))?,
            self.p(&format!("{prefix}.temb_proj.bias"))?,
        )?;
        let g2 = add_channel_bias(&g2, &tproj)?;
        let c2 = conv2d(
            &silu(&g2),
            self.p(&format!("{prefix}.conv2.weight"))?,
            self.p(&format!("{prefix}.conv2.bias"))?,
            1,
        )?;
        let shortcut = if in_c == out_c {
            h.clone()
        } else {
            conv2d(
                h,
                self.p(&format!("{prefix}.skip.weight"))?,
                self.p(&format!("{prefix}.skip.bias"))?,
                1,
            )?
        };
        c2.add(&shortcut)
    }
}

impl Denoiser for DenoiserModel {
    fn prediction_kind(&self) -> PredictionKind {
        self.config.prediction_kind
    }

    fn forward(&self, x_t: &Tensor<f32>, image: &Tensor<f32>, t: &[f64]) -> Result<Prediction> {
        let shape = x_t.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "denoiser expects [N,1,H,W] inputs, got {shape:?}"
            )));
        }
        if image.shape() != shape {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match mask shape {shape:?}",
                image.shape()
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::Shape(format!(
                "{} time values for batch of {}",
                t.len(),
                shape[0]
            )));
        }
        let div = self.config.spatial_divisor();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::Config(format!(
                "spatial dims {}x{} must be divisible by {div} for {} resolutions",
                shape[2],
                shape[3],
                self.config.channels.len()
            )));
        }

        let features = timestep_features(t, self.config.time_embed_dim)?;
        let temb = {
            let h = linear(
                &features,
                self.p("temb.mlp1.weight")?,
                self.p("temb.mlp1.bias")?,
            )?;
            let h = linear(&silu(&h), self.p("temb.mlp2.weight")?, self.p("temb.mlp2.bias")?)?;
            silu(&h)
        };

        let ch = &self.config.channels;
        let levels = ch.len();
        let mut h = conv2d(
            &concat_channels(x_t, image)?,
            self.p("stem.weight")?,
            self.p("stem.bias")?,
            1,
        )?;

        let mut skips: Vec<Tensor<f32>> = Vec::new();
        for l in 0..levels {
            for b in 0..self.config.num_res_blocks[l] {
                h = self.res_block(&format!("enc.{l}.{b}"), &h, &temb, ch[l], ch[l])?;
                skips.push(h.clone());
            }
            if l + 1 < levels {
                h = conv2d(
                    &h,
                    self.p(&format!("down.{l}.weight"))?,
                    self.p(&format!("down.{l}.bias"))?,
                    2,
                )?;
            }
        }

        for b in 0..self.config.middle_blocks {
            let c = ch[levels - 1];
            h = self.res_block(&format!("mid.{b}"), &h, &temb, c, c)?;
        }

        for l in (0..levels).rev() {
            for b in 0..self.config.num_res_blocks[l] {
                let skip = skips.pop().ok_or_else(|| {
                    Error::Config("encoder/decoder skip imbalance".to_string())
                })?;
                let joined = concat_channels(&h, &skip)?;
                h = self.res_block(&format!("dec.{l}.{b}"), &joined, &temb, 2 * ch[l], ch[l])?;
            }
            if l > 0 {
                h = upsample_nearest_2x(&h)?;
                h = conv2d(
                    &h,
                    self.p(&format!("up.{l}.weight"))?,
                    self.p(&format!("up.{l}.bias"))?,
                    1,
                )?;
            }
        }

        let g = group_norm(
            &h,
            group_count(ch[0]),
            self.p("out.gn.scale")?,
            self.p("out.gn.shift")?,
        )?;
        let out = conv2d(&silu(&g), self.p("out.conv.weight")?, self.p("out.conv.bias")?, 1)?;
        Ok(Prediction {
            kind: self.config.prediction_kind,
            value: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            channels: vec![8, 16],
            num_res_blocks: vec![1, 1],
            middle_blocks: 1,
            prediction_kind: PredictionKind::X0,
            time_embed_dim: 16,
            use_attention: false,
        }
    }

    #[test]
    fn timestep_features_are_deterministic_and_distinct() {
        let a = timestep_features(&[0.37, 0.37], 16).unwrap();
        assert_eq!(a.data()[..8], a.data()[16..24]);
        let b = timestep_features(&[0.5, 0.2], 16).unwrap();
        assert_ne!(b.data()[..16], b.data()[16..]);
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(&[0.0], 8).unwrap();
        assert_eq!(&f.data()[..4], &[0.0; 4], "sin half");
        assert_eq!(&f.data()[4..], &[1.0; 4], "cos half");
    }

    #[test]
    fn odd_embedding_dim_is_rejected() {
        assert!(matches!(
            timestep_features(&[0.1], 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_flag_is_rejected() {
        let cfg = DenoiserConfig {
            use_attention: true,
            ..tiny_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            DenoiserModel::init(cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let cfg = DenoiserConfig {
            channels: vec![48], // 2*48 = 96 splits into 32 groups, 48 does not
            num_res_blocks: vec![1],
            ..tiny_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(DenoiserModel::init(cfg, &mut rng).is_err());
    }

    #[test]
    fn fresh_model_outputs_zeros() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = DenoiserModel::init(tiny_config(), &mut rng).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.3);
        let img = Tensor::full(&[2, 1, 8, 8], -0.2);
        let out = model.forward(&x, &img, &[0.5, 0.9]).unwrap();
        assert_eq!(out.value.shape(), &[2, 1, 8, 8]);
        assert!(out.value.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = DenoiserModel::init(tiny_config(), &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        let b = DenoiserModel::init(tiny_config(), &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (name, pa) in &a.params {
            assert_eq!(pa.data(), b.params[name].data(), "parameter {name}");
        }
    }

    #[test]
    fn param_count_matches_hand_computed_sum() {
        // channels [8,16], blocks [1,1], middle 1, temb dim 16:
        //   temb mlps          2 * (16*16 + 16)                =   544
        //   stem               8*2*9 + 8                       =   152
        //   enc.0.0            2*8 + (8*8*9+8) + (8*16+8)
        //                      + 2*8 + (8*8*9+8)               =  1336
        //   down.0             16*8*9 + 16                     =  1168
        //   enc.1.0            2*16 + (16*16*9+16) + (16*16+16)
        //                      + 2*16 + (16*16*9+16)           =  4976
        //   mid.0              same as enc.1.0                 =  4976
        //   dec.1.0 (in 32)    2*32 + (16*32*9+16) + (16*16+16)
        //                      + 2*16 + (16*16*9+16)
        //                      + (16*32+16)                    =  7840
        //   up.1               8*16*9 + 8                      =  1160
        //   dec.0.0 (in 16)    2*16 + (8*16*9+8) + (8*16+8)
        //                      + 2*8 + (8*8*9+8) + (8*16+8)    =  2064
        //   out                2*8 + (1*8*9 + 1)               =    89
        //   total                                              = 24305
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = DenoiserModel::init(tiny_config(), &mut rng).unwrap();
        assert_eq!(model.param_count(), 24305);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_conv_parameters() {
        let narrow = DenoiserModel::init(tiny_config(), &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        let wide_cfg = DenoiserConfig {
            channels: vec![16, 32],
            ..tiny_config()
        };
        let wide = DenoiserModel::init(wide_cfg, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        let conv_count = |m: &DenoiserModel| -> usize {
            m.params
                .iter()
                .filter(|(name, p)| name.ends_with(".weight") && p.shape().len() == 4)
                .map(|(_, p)| p.numel())
                .sum()
        };
        let ratio = conv_count(&wide) as f64 / conv_count(&narrow) as f64;
        assert!(
            (3.4..=4.2).contains(&ratio),
            "conv parameter ratio {ratio} not ~4"
        );
    }

    #[test]
    fn forward_shape_contract_and_time_sensitivity() {
        let cfg = DenoiserConfig {
            channels: vec![8, 16, 16],
            num_res_blocks: vec![1, 1, 1],
            middle_blocks: 1,
            prediction_kind: PredictionKind::V,
            time_embed_dim: 16,
            use_attention: false,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        // A zero output head hides time sensitivity; overwrite it.
        let c0 = model.config.channels[0];
        model.params.insert(
            "out.conv.weight".to_string(),
            Tensor::param(
                &[1, c0, 3, 3],
                (0..c0 * 9).map(|i| 0.01 * (i as f32 % 7.0 - 3.0)).collect(),
            )
            .unwrap(),
        );
        let x = Tensor::randn(&[1, 1, 32, 32], &mut rng);
        let img = Tensor::randn(&[1, 1, 32, 32], &mut rng);
        let out_a = model.forward(&x, &img, &[0.2]).unwrap();
        assert_eq!(out_a.value.shape(), &[1, 1, 32, 32]);
        assert_eq!(out_a.kind, PredictionKind::V);
        let out_b = model.forward(&x, &img, &[0.9]).unwrap();
        let diff: f32 = out_a
            .value
            .data()
            .iter()
            .zip(out_b.value.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-4, "time conditioning had no effect");
    }

    #[test]
    fn indivisible_spatial_dims_fail_before_compute() {
        let cfg = DenoiserConfig {
            channels: vec![8, 16, 16],
            num_res_blocks: vec![1, 1, 1],
            ..tiny_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 1, 30, 30]); // 30 % 4 != 0
        let img = Tensor::zeros(&[1, 1, 30, 30]);
        assert!(matches!(
            model.forward(&x, &img, &[0.5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distant_content_outside_receptive_field_leaves_probe_unchanged() {
        // One resolution level: the network stacks 8 3x3 convolutions, so
        // the receptive field radius is 8. A 3x3 blob at rows 19..21 cannot
        // reach the probe pixel (2,2); translating the blob by one pixel
        // keeps every group statistic equal up to summation rounding, so
        // the probe output must agree to float noise while pixels near the
        // blob change.
        let cfg = DenoiserConfig {
            channels: vec![8],
            num_res_blocks: vec![1],
            middle_blocks: 1,
            prediction_kind: PredictionKind::X0,
            time_embed_dim: 16,
            use_attention: false,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        model.params.insert(
            "out.conv.weight".to_string(),
            Tensor::param(&[1, 8, 3, 3], (0..72).map(|i| 0.05 * ((i % 5) as f32 - 2.0)).collect())
                .unwrap(),
        );

        let size = 32;
        let blob = |dy: usize, dx: usize| -> Tensor<f32> {
            let mut data = vec![0.0f32; size * size];
            for y in 0..3 {
                for x in 0..3 {
                    data[(19 + dy + y) * size + 19 + dx + x] = 0.4 + 0.1 * (y * 3 + x) as f32;
                }
            }
            Tensor::from_vec(&[1, 1, size, size], data).unwrap()
        };
        let x_t = Tensor::zeros(&[1, 1, size, size]);
        let out_a = model.forward(&x_t, &blob(0, 0), &[0.5]).unwrap();
        let out_b = model.forward(&x_t, &blob(1, 1), &[0.5]).unwrap();
        let probe = 2 * size + 2;
        let far = 20 * size + 20;
        let probe_diff = (out_a.value.data()[probe] - out_b.value.data()[probe]).abs();
        let far_diff = (out_a.value.data()[far] - out_b.value.data()[far]).abs();
        assert!(
            probe_diff < 1e-4,
            "probe pixel changed by {probe_diff} despite being outside the receptive field"
        );
        assert!(far_diff > 1e-3, "blob move had no local effect ({far_diff})");
    }

    #[test]
    fn end_to_end_tiny_gradient_check() {
        use crate::schedule::{LossWeighting, NoiseSchedule, WeightingKind};
        use crate::tensor::gradcheck::max_relative_error;

        let cfg = DenoiserConfig {
            channels: vec![4, 8],
            num_res_blocks: vec![1, 1],
            middle_blocks: 1,
            prediction_kind: PredictionKind::X0,
            time_embed_dim: 8,
            use_attention: false,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        // Give the zero output head real values so its path carries signal.
        model.params.insert(
            "out.conv.weight".to_string(),
            Tensor::param(
                &[1, 4, 3, 3],
                (0..36)
                    .map(|_| (f64::sample_standard_normal(&mut rng) * 0.2) as f32)
                    .collect(),
            )
            .unwrap(),
        );

        let sched = NoiseSchedule::cosine(0.5).unwrap();
        let lw = LossWeighting::new(WeightingKind::SnrPlusOne);
        let images = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let targets: Vec<f32> = (0..128).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let batch = crate::diffusion::TrainBatch {
            images,
            targets_pm: Tensor::from_vec(&[2, 1, 8, 8], targets).unwrap(),
        };

        // Check a spread of parameters: conv kernels, norms, time MLP,
        // biases. Perturbing via fresh maps keeps the oracle independent.
        let names: Vec<String> = model
            .params
            .keys()
            .filter(|n| {
                [
                    "stem.weight",
                    "enc.0.0.conv1.weight",
                    "enc.0.0.gn1.scale",
                    "enc.1.0.temb_proj.weight",
                    "mid.0.conv2.bias",
                    "dec.1.0.skip.weight",
                    "dec.0.0.conv2.weight",
                    "temb.mlp1.weight",
                    "out.conv.weight",
                    "out.conv.bias",
                ]
                .contains(&n.as_str())
            })
            .cloned()
            .collect();
        assert_eq!(names.len(), 10);

        for name in names {
            let base = model.params[&name].clone();
            let worst = max_relative_error(&[base.clone()], |p| {
                let mut m = DenoiserModel {
                    config: model.config.clone(),
                    params: model.params.clone(),
                };
                m.params.insert(name.clone(), p[0].clone());
                let mut loss_rng = ChaCha12Rng::seed_from_u64(77);
                crate::diffusion::training_loss(&m, &batch, &sched, &lw, &mut loss_rng).unwrap()
            });
            assert!(
                worst < 1e-3,
                "gradient mismatch {worst:.2e} for parameter {name}"
            );
        }
    }
}
