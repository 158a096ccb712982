//! Per-layer auto-encoder: analysis transform, synthesis transform and the
//! layer's entropy model, plus the stack of layers forming a scalable model.
//!
//! ```text
//! analysis:  conv 9x9/4 -> GDN -> conv 5x5/2 -> GDN -> conv 5x5/2
//! synthesis: tconv 5x5/2 -> IGDN -> tconv 5x5/2 -> IGDN -> tconv 9x9/4 (3 channels)
//! ```
//!
//! The latent has no activation, and the synthesis output has no final
//! nonlinearity, so enhance layers can reproduce signed residuals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy_model::{freeze_cdf, CdfTable, EntropyModel};
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::numerics::{
    conv2d_backward, conv2d_forward, gdn_backward, gdn_forward, igdn_backward, igdn_forward,
    tconv2d_backward, tconv2d_forward, ConvParams, GdnParams, Tensor, BETA_MIN,
};

/// Total spatial down-sampling of the analysis transform.
pub const DOWNSAMPLE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;

pub const FEATURE_MAP_LADDER: [usize; 5] = [48, 48, 96, 144, 192];
const LAMBDA_MSE: [f64; 5] = [3000.0, 1000.0, 300.0, 100.0, 30.0];
const LAMBDA_MSSSIM: [f64; 4] = [50.0, 30.0, 10.0, 0.5];

/// Distortion measure a model is trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mse,
    MsSsim,
}

impl Objective {
    pub fn max_layers(self) -> usize {
        match self {
            Objective::Mse => LAMBDA_MSE.len(),
            Objective::MsSsim => LAMBDA_MSSSIM.len(),
        }
    }

    /// Default rate weight of layer `index`.
    pub fn lambda(self, index: usize) -> Option<f64> {
        match self {
            Objective::Mse => LAMBDA_MSE.get(index).copied(),
            Objective::MsSsim => LAMBDA_MSSSIM.get(index).copied(),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mse" => Ok(Objective::Mse),
            "msssim" => Ok(Objective::MsSsim),
            _ => Err(Error::invalid(format!(
                "unknown objective {s:?}; expected mse or ms-ssim"
            ))),
        }
    }
}

/// One convolution followed by an optional (I)GDN.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: ConvParams,
    pub norm: Option<GdnParams>,
}

impl Stage {
    fn zeros_like(&self) -> Self {
        Stage {
            conv: self.conv.zeros_like(),
            norm: self.norm.as_ref().map(GdnParams::zeros_like),
        }
    }
}

/// A trainable parameter array with its name and optional lower bound.
pub struct NamedParam<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub lower_bound: Option<f64>,
}

fn stage_params<'a>(prefix: &str, stages: &'a mut [Stage], out: &mut Vec<NamedParam<'a>>) {
    for (i, st) in stages.iter_mut().enumerate() {
        out.push(NamedParam {
            name: format!("{prefix}{i}.kernels"),
            values: &mut st.conv.kernels,
            lower_bound: None,
        });
        out.push(NamedParam {
            name: format!("{prefix}{i}.bias"),
            values: &mut st.conv.bias,
            lower_bound: None,
        });
        if let Some(g) = st.norm.as_mut() {
            out.push(NamedParam {
                name: format!("{prefix}{i}.beta"),
                values: &mut g.beta,
                lower_bound: Some(BETA_MIN),
            });
            out.push(NamedParam {
                name: format!("{prefix}{i}.gamma"),
                values: &mut g.gamma,
                lower_bound: Some(0.0),
            });
        }
    }
}

/// Gradients (or any other same-shaped values) for the auto-encoder part
/// of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AeParams {
    pub encoder: Vec<Stage>,
    pub decoder: Vec<Stage>,
}

impl AeParams {
    /// Arrays in serialization order: encoder stages, then decoder stages.
    pub fn params_mut(&mut self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        stage_params("enc", &mut self.encoder, &mut out);
        stage_params("dec", &mut self.decoder, &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        AeParams {
            encoder: self.encoder.iter().map(Stage::zeros_like).collect(),
            decoder: self.decoder.iter().map(Stage::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &mut AeParams) {
        for (a, b) in self.params_mut().into_iter().zip(other.params_mut()) {
            a.values.iter_mut().zip(b.values.iter()).for_each(|(x, y)| *x += y);
        }
    }
}

/// One layer of the scalable model (base when `layer_index == 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerModel {
    pub layer_index: usize,
    pub feature_maps: usize,
    pub lambda_rate: f64,
    pub ae: AeParams,
    pub entropy: EntropyModel,
    /// Frozen coding tables; present once the layer has been trained.
    pub cdf: Option<CdfTable>,
}

/// Inputs of every op in a transform, kept for the backward pass.
pub struct Trace {
    conv_inputs: Vec<Tensor>,
    norm_inputs: Vec<Option<Tensor>>,
}

impl LayerModel {
    /// A freshly initialized layer. The same seed gives the same layer.
    pub fn new(layer_index: usize, feature_maps: usize, lambda_rate: f64, seed: u64) -> Result<Self> {
        if feature_maps == 0 || feature_maps > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "feature_maps must be in 1..=65535, got {feature_maps}"
            )));
        }
        if !(lambda_rate.is_finite() && lambda_rate > 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be positive, got {lambda_rate}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = feature_maps;
        let shapes: [(usize, usize, usize, usize, bool); 3] =
            [(IMAGE_CHANNELS, n, 9, 4, true), (n, n, 5, 2, true), (n, n, 5, 2, false)];
        let mut encoder = Vec::new();
        for (cin, cout, k, s, norm) in shapes {
            let mut conv = ConvParams::conv(cin, cout, k, s)?;
            conv.init_uniform(&mut rng);
            encoder.push(Stage {
                conv,
                norm: norm.then(|| GdnParams::new(cout)),
            });
        }
        let shapes: [(usize, usize, usize, usize, bool); 3] =
            [(n, n, 5, 2, true), (n, n, 5, 2, true), (n, IMAGE_CHANNELS, 9, 4, false)];
        let mut decoder = Vec::new();
        for (cin, cout, k, s, norm) in shapes {
            let mut conv = ConvParams::transposed(cin, cout, k, s)?;
            conv.init_uniform(&mut rng);
            decoder.push(Stage {
                conv,
                norm: norm.then(|| GdnParams::new(cout)),
            });
        }
        Ok(LayerModel {
            layer_index,
            feature_maps,
            lambda_rate,
            ae: AeParams { encoder, decoder },
            entropy: EntropyModel::new(feature_maps, &mut rng),
            cdf: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.cdf.is_some()
    }

    /// Builds the integer coding tables from the current entropy model.
    pub fn freeze(&mut self) -> Result<()> {
        self.cdf = Some(freeze_cdf(&self.entropy)?);
        Ok(())
    }

    pub fn cdf_table(&self) -> Result<&CdfTable> {
        self.cdf.as_ref().ok_or_else(|| {
            Error::Model(format!("layer {} has not been trained", self.layer_index))
        })
    }

    /// Encoder transform: image (or residual) to real-valued latent.
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.analysis_traced(x)?.0)
    }

    pub fn analysis_traced(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let s = x.shape();
        if s.channels != IMAGE_CHANNELS {
            return Err(Error::invalid(format!(
                "analysis expects {IMAGE_CHANNELS} channels, got {}",
                s.channels
            )));
        }
        if s.height % DOWNSAMPLE != 0 || s.width % DOWNSAMPLE != 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Precondition(format!(
                "input {}x{} is not a nonzero multiple of {DOWNSAMPLE}; pad it first",
                s.height, s.width
            )));
        }
        run(&self.ae.encoder, x, conv2d_forward, gdn_forward)
    }

    /// Decoder transform: latent to image-space output, unclipped.
    pub fn synthesis(&self, q: &Tensor) -> Result<Tensor> {
        Ok(self.synthesis_traced(q)?.0)
    }

    pub fn synthesis_traced(&self, q: &Tensor) -> Result<(Tensor, Trace)> {
        if q.shape().channels != self.feature_maps {
            return Err(Error::invalid(format!(
                "synthesis expects {} latent channels, got {}",
                self.feature_maps,
                q.shape().channels
            )));
        }
        run(&self.ae.decoder, q, tconv2d_forward, igdn_forward)
    }

    /// Backpropagates through the analysis transform. Parameter gradients
    /// are added into `grads.encoder`; the input gradient is returned.
    pub fn analysis_backward(&self, trace: &Trace, grad_latent: &Tensor, grads: &mut AeParams) -> Result<Tensor> {
        back(&self.ae.encoder, trace, grad_latent, &mut grads.encoder, conv2d_backward, gdn_backward)
    }

    /// Backpropagates through the synthesis transform, accumulating into
    /// `grads.decoder` and returning the latent gradient.
    pub fn synthesis_backward(&self, trace: &Trace, grad_out: &Tensor, grads: &mut AeParams) -> Result<Tensor> {
        back(&self.ae.decoder, trace, grad_out, &mut grads.decoder, tconv2d_backward, igdn_backward)
    }
}

type ConvFwd = fn(&Tensor, &ConvParams) -> Result<Tensor>;
type NormFwd = fn(&Tensor, &GdnParams) -> Result<Tensor>;
type ConvBwd = fn(&Tensor, &ConvParams, &Tensor) -> Result<(Tensor, ConvParams)>;
type NormBwd = fn(&Tensor, &GdnParams, &Tensor) -> Result<(Tensor, GdnParams)>;

fn run(stages: &[Stage], x: &Tensor, conv: ConvFwd, norm: NormFwd) -> Result<(Tensor, Trace)> {
    let mut trace = Trace {
        conv_inputs: Vec::with_capacity(stages.len()),
        norm_inputs: Vec::with_capacity(stages.len()),
    };
    let mut h = x.clone();
    for st in stages {
        let c = conv(&h, &st.conv)?;
        trace.conv_inputs.push(h);
        h = match &st.norm {
            Some(g) => {
                let y = norm(&c, g)?;
                trace.norm_inputs.push(Some(c));
                y
            }
            None => {
                trace.norm_inputs.push(None);
                c
            }
        };
    }
    Ok((h, trace))
}

fn back(
    stages: &[Stage],
    trace: &Trace,
    grad_out: &Tensor,
    grads: &mut [Stage],
    conv: ConvBwd,
    norm: NormBwd,
) -> Result<Tensor> {
    let mut g = grad_out.clone();
    for i in (0..stages.len()).rev() {
        if let (Some(p), Some(input)) = (&stages[i].norm, &trace.norm_inputs[i]) {
            let (gx, gp) = norm(input, p, &g)?;
            let acc = grads[i].norm.as_mut().expect("gradient layout mirrors the model");
            acc.beta.iter_mut().zip(&gp.beta).for_each(|(a, b)| *a += b);
            acc.gamma.iter_mut().zip(&gp.gamma).for_each(|(a, b)| *a += b);
            g = gx;
        }
        let (gx, gp) = conv(&trace.conv_inputs[i], &stages[i].conv, &g)?;
        let acc = &mut grads[i].conv;
        acc.kernels.iter_mut().zip(&gp.kernels).for_each(|(a, b)| *a += b);
        acc.bias.iter_mut().zip(&gp.bias).for_each(|(a, b)| *a += b);
        g = gx;
    }
    Ok(g)
}

/// Ordered stack of layers; index 0 is the base layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalableModel {
    pub layers: Vec<LayerModel>,
    /// Pixel value that maps to 1.0 in model units.
    pub input_scale: f64,
    pub version: u16,
}

pub const MODEL_VERSION: u16 = 1;
pub const INPUT_SCALE: f64 = 255.0;
/// Subtracted after scaling so model units are centred on mid-grey. The
/// base layer then sees zero-mean input like every enhance layer does.
pub const INPUT_OFFSET: f64 = 0.5;

impl ScalableModel {
    pub fn new(layers: Vec<LayerModel>) -> Result<Self> {
        let model = ScalableModel {
            layers,
            input_scale: INPUT_SCALE,
            version: MODEL_VERSION,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        if self.layers.len() > u8::MAX as usize {
            return Err(Error::Model(format!("{} layers exceed 255", self.layers.len())));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_index != i {
                return Err(Error::Model(format!(
                    "layer at position {i} has index {}",
                    l.layer_index
                )));
            }
        }
        Ok(())
    }

    /// Image to a 1x3xHxW tensor in model units,
    /// `pixel / input_scale - INPUT_OFFSET`.
    pub fn to_units(&self, img: &RgbImage) -> Tensor {
        img.to_tensor(self.input_scale).map(|v| v - INPUT_OFFSET)
    }

    /// Inverse of [`ScalableModel::to_units`] on the top-left
    /// `width x height` window, clamped and rounded to 8 bits.
    pub fn to_image(&self, t: &Tensor, width: usize, height: usize) -> Result<RgbImage> {
        RgbImage::from_tensor(&t.map(|v| v + INPUT_OFFSET), self.input_scale, width, height)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of leading layers that carry frozen coding tables.
    pub fn trained_layers(&self) -> usize {
        self.layers.iter().take_while(|l| l.is_trained()).count()
    }
}

/// Builds an untrained model with the default feature-map and rate ladders.
pub fn build_default_model(num_layers: usize, objective: Objective, seed: u64) -> Result<ScalableModel> {
    let max = objective.max_layers();
    if num_layers == 0 || num_layers > max {
        return Err(Error::invalid(format!(
            "{objective:?} models have 1..={max} layers, got {num_layers}"
        )));
    }
    let layers = (0..num_layers)
        .map(|i| {
            let lambda = objective.lambda(i).expect("index checked against ladder");
            LayerModel::new(i, FEATURE_MAP_LADDER[i], lambda, layer_seed(seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    ScalableModel::new(layers)
}

/// Seed for initializing layer `index` of a model seeded with `seed`.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Shape;

    fn small_layer(fm: usize) -> LayerModel {
        LayerModel::new(0, fm, 100.0, 7).unwrap()
    }

    #[test]
    fn analysis_and_synthesis_shapes() {
        let m = small_layer(8);
        let x = Tensor::from_fn(Shape::new(1, 3, 64, 48), |_, c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let q = m.analysis(&x).unwrap();
        assert_eq!(q.shape(), Shape::new(1, 8, 4, 3));
        let y = m.synthesis(&q).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn zero_in_zero_out() {
        let m = small_layer(4);
        let q = m.analysis(&Tensor::zeros(Shape::new(1, 3, 32, 32))).unwrap();
        assert_eq!(q.max_abs(), 0.0);
        let y = m.synthesis(&Tensor::zeros(Shape::new(1, 4, 2, 2))).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn indivisible_input_is_a_precondition_error() {
        let m = small_layer(4);
        let err = m.analysis(&Tensor::zeros(Shape::new(1, 3, 40, 32))).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let err = m.synthesis(&Tensor::zeros(Shape::new(1, 5, 2, 2))).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn default_ladders() {
        let m = build_default_model(5, Objective::Mse, 1).unwrap();
        let lambdas: Vec<f64> = m.layers.iter().map(|l| l.lambda_rate).collect();
        assert_eq!(lambdas, vec![3000.0, 1000.0, 300.0, 100.0, 30.0]);
        let fms: Vec<usize> = m.layers.iter().map(|l| l.feature_maps).collect();
        assert_eq!(fms, vec![48, 48, 96, 144, 192]);

        let m = build_default_model(4, Objective::MsSsim, 1).unwrap();
        let lambdas: Vec<f64> = m.layers.iter().map(|l| l.lambda_rate).collect();
        assert_eq!(lambdas, vec![50.0, 30.0, 10.0, 0.5]);

        let m = build_default_model(1, Objective::Mse, 1).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!((m.layers[0].feature_maps, m.layers[0].lambda_rate), (48, 3000.0));

        assert!(build_default_model(0, Objective::Mse, 1).is_err());
        assert!(build_default_model(6, Objective::Mse, 1).is_err());
        assert!(build_default_model(5, Objective::MsSsim, 1).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(small_layer(6), small_layer(6));
        assert_ne!(small_layer(6), LayerModel::new(0, 6, 100.0, 8).unwrap());
    }

    #[test]
    fn parameter_listing_has_bounds_on_gdn_only() {
        let mut m = small_layer(4);
        let params = m.ae.params_mut();
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[..4], ["enc0.kernels", "enc0.bias", "enc0.beta", "enc0.gamma"]);
        assert_eq!(params.len(), 2 * (4 + 4 + 2));
        for p in &params {
            let bounded = p.name.ends_with("beta") || p.name.ends_with("gamma");
            assert_eq!(p.lower_bound.is_some(), bounded, "{}", p.name);
        }
    }
}
