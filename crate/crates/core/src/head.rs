//! The uncertainty head: parameters, configuration, ablation variants and
//! the forward pass shared by training and inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_on_graph, FusionParams, FusionVars, DEFAULT_FUSED_CHANNELS};
use crate::maps::{
    aleatoric_on_graph, anchor_on_graph, calibration_on_graph, ranking_on_graph, temper_on_graph,
    LogitStats, MapParams, UncertaintyBundle, DEFAULT_GAMMA,
};
use crate::probe::{
    epistemic_on_graph, mean_square_on_graph, ProbeParams, ProbePatterns, DEFAULT_EPSILON,
    DEFAULT_NUM_PROBES, DEFAULT_SIGMA_INIT,
};
use crate::tensor::ops::{round_f32, UNIT_VARIANCE_GAIN};
use crate::tensor::{constant_field, to_field, DenseField, Dims, Graph, Linear, LinearVars, Var};

/// Which of the two derived maps the head carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapVariant {
    /// Calibration map tempers logits, ranking map scores errors.
    #[default]
    Both,
    /// No ranking map: the calibration map is also the error score and only
    /// the probabilistic losses train the head.
    CalibrationOnly,
    /// No calibration map: logits are left untempered.
    RankingOnly,
}

/// How the epistemic signal is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// Rank-1 probes with learned scales.
    #[default]
    Learned,
    /// Rank-1 probes with scales frozen at their initial value.
    FixedSigma,
    /// No probes: `softplus(linear(h))` stands in for the epistemic map and
    /// the perturbation energies are zero.
    DirectHead,
}

/// Architecture and ablation switches of the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Channel count of each tap; tap 0 is the final, full-resolution one.
    pub tap_channels: Vec<usize>,
    pub fused_channels: usize,
    /// Feed tap 0 to the head directly instead of fusing all taps.
    pub single_tap: bool,
    pub num_probes: usize,
    pub sigma_init: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub aleatoric: bool,
    pub variant: MapVariant,
    pub probe_mode: ProbeMode,
    /// Custom probe patterns; the signed one-hot set when absent.
    pub patterns: Option<Vec<Vec<f64>>>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            tap_channels: vec![16, 8],
            fused_channels: DEFAULT_FUSED_CHANNELS,
            single_tap: false,
            num_probes: DEFAULT_NUM_PROBES,
            sigma_init: DEFAULT_SIGMA_INIT,
            epsilon: DEFAULT_EPSILON,
            gamma: DEFAULT_GAMMA,
            aleatoric: true,
            variant: MapVariant::Both,
            probe_mode: ProbeMode::Learned,
            patterns: None,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.tap_channels.is_empty() || self.tap_channels.contains(&0) {
            return Err(Error::InvalidArgument("tap channel counts must be positive".into()));
        }
        if self.fused_channels == 0 || self.num_probes == 0 {
            return Err(Error::InvalidArgument(
                "fused_channels and num_probes must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0) || !(self.epsilon > 0.0) || !(self.sigma_init > self.epsilon) {
            return Err(Error::InvalidArgument(
                "gamma, epsilon must be positive and sigma_init must exceed epsilon".into(),
            ));
        }
        self.pattern_set()?;
        Ok(())
    }

    /// Width of the representation the probes read.
    pub fn feature_channels(&self) -> usize {
        if self.single_tap {
            self.tap_channels[0]
        } else {
            self.fused_channels
        }
    }

    pub fn pattern_set(&self) -> Result<ProbePatterns> {
        match &self.patterns {
            None => Ok(ProbePatterns::signed_one_hot(self.num_probes)),
            Some(p) => {
                let set = ProbePatterns::new(p.clone())?;
                if set.dim() != self.num_probes {
                    return Err(Error::InvalidArgument(format!(
                        "patterns have length {} for {} probes",
                        set.dim(),
                        self.num_probes
                    )));
                }
                Ok(set)
            }
        }
    }
}

/// All learnable parameters of the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Absent in single-tap mode.
    pub fusion: Option<FusionParams>,
    /// Absent with [`ProbeMode::DirectHead`].
    pub probe: Option<ProbeParams>,
    /// Present only with [`ProbeMode::DirectHead`].
    pub direct: Option<Linear>,
    pub maps: MapParams,
}

/// One named parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
    pub learnable: bool,
}

/// One named parameter tensor, mutable.
#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub learnable: bool,
}

fn push_linear<'a>(out: &mut Vec<ParamRef<'a>>, name: &str, l: &'a Linear, learnable: bool) {
    out.push(ParamRef {
        name: format!("{name}.weight"),
        shape: vec![l.out_dim, l.in_dim],
        values: &l.weight,
        learnable,
    });
    out.push(ParamRef {
        name: format!("{name}.bias"),
        shape: vec![l.out_dim],
        values: &l.bias,
        learnable,
    });
}

fn push_linear_mut<'a>(out: &mut Vec<ParamMut<'a>>, name: &str, l: &'a mut Linear, learnable: bool) {
    out.push(ParamMut {
        name: format!("{name}.weight"),
        values: &mut l.weight,
        learnable,
    });
    out.push(ParamMut {
        name: format!("{name}.bias"),
        values: &mut l.bias,
        learnable,
    });
}

/// Which parameter groups a configuration trains.
struct Trains {
    alpha: bool,
    ale: bool,
    cal: bool,
    rank: bool,
}

impl Trains {
    fn of(cfg: &HeadConfig) -> Self {
        let cal = cfg.variant != MapVariant::RankingOnly;
        let rank = cfg.variant != MapVariant::CalibrationOnly;
        Self {
            alpha: cfg.probe_mode != ProbeMode::FixedSigma,
            ale: cal || rank,
            cal,
            rank,
        }
    }
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let features = cfg.feature_channels();
        let fusion = (!cfg.single_tap)
            .then(|| FusionParams::init(&cfg.tap_channels, cfg.fused_channels, rng));
        let (probe, direct) = match cfg.probe_mode {
            ProbeMode::DirectHead => (None, Some(Linear::random(1, features, UNIT_VARIANCE_GAIN, rng))),
            ProbeMode::Learned | ProbeMode::FixedSigma => (
                Some(ProbeParams::init(
                    features,
                    cfg.num_probes,
                    cfg.num_classes,
                    cfg.sigma_init,
                    cfg.epsilon,
                    rng,
                )?),
                None,
            ),
        };
        let mut maps = MapParams::init(features, cfg.gamma, cfg.aleatoric)?;
        if let Some(ale) = maps.psi_ale.as_mut() {
            *ale = Linear::random(1, features, 0.1, rng);
        }
        Ok(Self {
            fusion,
            probe,
            direct,
            maps,
        })
    }

    /// Named tensors in registration order, flagged by whether `cfg` trains them.
    pub fn tensors(&self, cfg: &HeadConfig) -> Vec<ParamRef<'_>> {
        let t = Trains::of(cfg);
        let mut out = Vec::new();
        if let Some(fu) = &self.fusion {
            for (m, p) in fu.projections.iter().enumerate() {
                push_linear(&mut out, &format!("fusion.proj.{m}"), p, true);
            }
            push_linear(&mut out, "fusion.fuser", &fu.fuser, true);
        }
        if let Some(p) = &self.probe {
            push_linear(&mut out, "probe.psi", &p.psi, true);
            out.push(ParamRef {
                name: "probe.alpha".into(),
                shape: vec![p.alpha.len()],
                values: &p.alpha,
                learnable: t.alpha,
            });
            push_linear(&mut out, "probe.mixer", &p.mixer, true);
        }
        if let Some(d) = &self.direct {
            push_linear(&mut out, "direct", d, true);
        }
        if let Some(a) = &self.maps.psi_ale {
            push_linear(&mut out, "maps.psi_ale", a, t.ale);
        }
        push_linear(&mut out, "maps.psi_cal", &self.maps.psi_cal, t.cal);
        for (name, v) in [
            ("maps.rank_a", &self.maps.rank_a),
            ("maps.rank_b", &self.maps.rank_b),
            ("maps.rank_c", &self.maps.rank_c),
        ] {
            out.push(ParamRef {
                name: name.into(),
                shape: vec![1],
                values: std::slice::from_ref(v),
                learnable: t.rank,
            });
        }
        out
    }

    /// Mutable view of the tensors, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self, cfg: &HeadConfig) -> Vec<ParamMut<'_>> {
        let t = Trains::of(cfg);
        let mut out = Vec::new();
        let HeadParams {
            fusion,
            probe,
            direct,
            maps,
        } = self;
        if let Some(fu) = fusion {
            for (m, p) in fu.projections.iter_mut().enumerate() {
                push_linear_mut(&mut out, &format!("fusion.proj.{m}"), p, true);
            }
            push_linear_mut(&mut out, "fusion.fuser", &mut fu.fuser, true);
        }
        if let Some(p) = probe {
            push_linear_mut(&mut out, "probe.psi", &mut p.psi, true);
            out.push(ParamMut {
                name: "probe.alpha".into(),
                values: &mut p.alpha,
                learnable: t.alpha,
            });
            push_linear_mut(&mut out, "probe.mixer", &mut p.mixer, true);
        }
        if let Some(d) = direct {
            push_linear_mut(&mut out, "direct", d, true);
        }
        let MapParams {
            psi_ale,
            psi_cal,
            rank_a,
            rank_b,
            rank_c,
            ..
        } = maps;
        if let Some(a) = psi_ale {
            push_linear_mut(&mut out, "maps.psi_ale", a, t.ale);
        }
        push_linear_mut(&mut out, "maps.psi_cal", psi_cal, t.cal);
        for (name, v) in [("maps.rank_a", rank_a), ("maps.rank_b", rank_b), ("maps.rank_c", rank_c)] {
            out.push(ParamMut {
                name: name.into(),
                values: std::slice::from_mut(v),
                learnable: t.rank,
            });
        }
        out
    }

    /// Rounds every value to `f32` precision.
    pub fn round_to_storage(&mut self, cfg: &HeadConfig) {
        for p in self.tensors_mut(cfg) {
            p.values.iter_mut().for_each(|x| *x = round_f32(*x));
        }
    }

    /// Checks that the parameter shapes fit `cfg`.
    pub fn check(&self, cfg: &HeadConfig) -> Result<()> {
        cfg.validate()?;
        let features = cfg.feature_channels();
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} do not fit the head config")));
        match (&self.fusion, cfg.single_tap) {
            (None, true) => {}
            (Some(fu), false) => {
                let proj_ok = fu.projections.len() == cfg.tap_channels.len()
                    && fu
                        .projections
                        .iter()
                        .zip(&cfg.tap_channels)
                        .all(|(p, &c)| p.in_dim == c && p.out_dim == cfg.fused_channels);
                if !proj_ok
                    || fu.fuser.in_dim != cfg.fused_channels * cfg.tap_channels.len()
                    || fu.fuser.out_dim != cfg.fused_channels
                {
                    return bad("fusion parameters");
                }
            }
            _ => return bad("fusion parameters"),
        }
        match (&self.probe, &self.direct, cfg.probe_mode) {
            (None, Some(d), ProbeMode::DirectHead) if d.in_dim == features && d.out_dim == 1 => {}
            (Some(p), None, ProbeMode::Learned | ProbeMode::FixedSigma)
                if p.psi.in_dim == features
                    && p.psi.out_dim == cfg.num_probes
                    && p.alpha.len() == cfg.num_probes
                    && p.mixer.in_dim == cfg.num_probes
                    && p.mixer.out_dim == cfg.num_classes => {}
            _ => return bad("probe parameters"),
        }
        match &self.maps.psi_ale {
            Some(a) if cfg.aleatoric && a.in_dim == features && a.out_dim == 1 => {}
            None if !cfg.aleatoric => {}
            _ => return bad("aleatoric parameters"),
        }
        let cal_in = if cfg.aleatoric { 3 } else { 2 };
        if self.maps.psi_cal.in_dim != cal_in || self.maps.psi_cal.out_dim != 1 {
            return bad("calibration parameters");
        }
        Ok(())
    }

    /// Runs the head on one batch and returns every map.
    pub fn infer(&self, cfg: &HeadConfig, input: &HeadInput<'_>) -> Result<UncertaintyBundle> {
        let mut g = Graph::new();
        let vars = HeadVars::register(&mut g, self, cfg, false);
        let fw = forward(&mut g, &vars, self, cfg, input)?;
        fw.bundle(&g)
    }
}

/// Frozen-backbone inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a> {
    pub taps: &'a [DenseField],
    pub logits: &'a DenseField,
}

/// Graph handles of every parameter tensor.
#[derive(Debug, Clone)]
pub struct HeadVars {
    fusion: Option<FusionVars>,
    psi: Option<LinearVars>,
    alpha: Option<Var>,
    mixer: Option<LinearVars>,
    direct: Option<LinearVars>,
    psi_ale: Option<LinearVars>,
    psi_cal: LinearVars,
    rank: [Var; 3],
    /// Registration order, matching [`HeadParams::tensors`].
    pub ordered: Vec<Var>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    k: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.k += 1;
        self.vars[self.k - 1]
    }

    fn linear(&mut self, l: &Linear) -> LinearVars {
        LinearVars {
            weight: self.next(),
            bias: self.next(),
            out_dim: l.out_dim,
        }
    }
}

impl HeadVars {
    /// Records the parameters on `g`. With `trainable` false every tensor is
    /// a constant; otherwise each follows its flag from [`HeadParams::tensors`].
    pub fn register(g: &mut Graph, params: &HeadParams, cfg: &HeadConfig, trainable: bool) -> Self {
        let ordered: Vec<Var> = params
            .tensors(cfg)
            .iter()
            .map(|t| {
                let dims = Dims::vector(t.values.len());
                let v = if trainable && t.learnable {
                    g.param(dims, t.values.to_vec())
                } else {
                    g.constant(dims, t.values.to_vec())
                };
                v.expect("dims built from values")
            })
            .collect();
        let mut cur = Cursor {
            vars: &ordered,
            k: 0,
        };
        let fusion = params.fusion.as_ref().map(|fu| FusionVars {
            projections: fu.projections.iter().map(|p| cur.linear(p)).collect(),
            fuser: cur.linear(&fu.fuser),
        });
        let (mut psi, mut alpha, mut mixer) = (None, None, None);
        if let Some(p) = &params.probe {
            psi = Some(cur.linear(&p.psi));
            alpha = Some(cur.next());
            mixer = Some(cur.linear(&p.mixer));
        }
        let direct = params.direct.as_ref().map(|d| cur.linear(d));
        let psi_ale = params.maps.psi_ale.as_ref().map(|a| cur.linear(a));
        let psi_cal = cur.linear(&params.maps.psi_cal);
        let rank = [cur.next(), cur.next(), cur.next()];
        debug_assert_eq!(cur.k, ordered.len());
        Self {
            fusion,
            psi,
            alpha,
            mixer,
            direct,
            psi_ale,
            psi_cal,
            rank,
            ordered,
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub features: Var,
    pub probe_responses: Option<Var>,
    /// Unpatterned logit perturbation `mixer(v)`; absent for the direct head.
    pub base_delta: Option<Var>,
    pub epistemic: Var,
    pub aleatoric: Option<Var>,
    pub calibration: Var,
    pub probe_energy: Var,
    pub residual_energy: Var,
    pub margin: Var,
    pub weight: Var,
    pub entropy: Var,
    pub tempered_logits: Var,
    pub anchor: Var,
    pub ranking: Var,
    /// The map trained and evaluated as the error score.
    pub score: Var,
    pub num_classes: usize,
}

impl ForwardVars {
    pub fn bundle(&self, g: &Graph) -> Result<UncertaintyBundle> {
        Ok(UncertaintyBundle {
            probe_responses: self.probe_responses.map(|v| to_field(g, v)).transpose()?,
            epistemic: to_field(g, self.epistemic)?,
            aleatoric: self.aleatoric.map(|v| to_field(g, v)).transpose()?,
            calibration: to_field(g, self.calibration)?,
            ranking: to_field(g, self.score)?,
            anchor: to_field(g, self.anchor)?,
            probe_energy: to_field(g, self.probe_energy)?,
            residual_energy: to_field(g, self.residual_energy)?,
            margin: to_field(g, self.margin)?,
            weight: to_field(g, self.weight)?,
            entropy: to_field(g, self.entropy)?,
            tempered_logits: to_field(g, self.tempered_logits)?,
        })
    }
}

fn check_input(cfg: &HeadConfig, input: &HeadInput<'_>) -> Result<()> {
    let z = input.logits;
    if z.channels() != cfg.num_classes {
        return Err(Error::Channels {
            expected: cfg.num_classes,
            actual: z.channels(),
        });
    }
    let needed = if cfg.single_tap { 1 } else { cfg.tap_channels.len() };
    if input.taps.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "{} taps given, {needed} required",
            input.taps.len()
        )));
    }
    for (t, &c) in input.taps.iter().zip(&cfg.tap_channels).take(needed) {
        if t.channels() != c {
            return Err(Error::Channels {
                expected: c,
                actual: t.channels(),
            });
        }
        if t.batch() != z.batch() || t.spatial().len() != z.spatial().len() {
            return Err(Error::Shape(format!(
                "tap {:?} incompatible with logits {:?}",
                t.shape(),
                z.shape()
            )));
        }
    }
    let grid = crate::tensor::finest_grid(input.taps[..needed].iter().map(DenseField::spatial));
    if grid != z.spatial() {
        return Err(Error::Shape(format!(
            "finest tap grid {grid:?} differs from logits grid {:?}",
            z.spatial()
        )));
    }
    Ok(())
}

/// Records the full head on `g`.
pub fn forward(
    g: &mut Graph,
    vars: &HeadVars,
    params: &HeadParams,
    cfg: &HeadConfig,
    input: &HeadInput<'_>,
) -> Result<ForwardVars> {
    check_input(cfg, input)?;
    let z = input.logits;
    let (nb, nc, nv) = (z.batch(), z.channels(), z.voxels());
    let spatial = z.spatial().to_vec();
    let one = Dims::new(nb, 1, spatial.clone());

    let stats = LogitStats::compute(&z.to_f64(), nb, nc, nv, params.maps.gamma);
    let logits = constant_field(g, z);
    let margin = g.constant(one.clone(), stats.margin)?;
    let weight = g.constant(one.clone(), stats.weight)?;
    let entropy = g.constant(one.clone(), stats.entropy)?;

    let features = match (&vars.fusion, cfg.single_tap) {
        (Some(fv), false) => {
            let taps: Vec<Var> = input.taps[..cfg.tap_channels.len()]
                .iter()
                .map(|t| constant_field(g, t))
                .collect();
            fuse_on_graph(g, &taps, fv)?
        }
        _ => constant_field(g, &input.taps[0]),
    };

    let zeros = || vec![0.0; nb * nv];
    let (probe_responses, base_delta, epistemic, probe_energy, residual_energy) =
        match (&vars.psi, vars.alpha, &vars.mixer, &vars.direct) {
            (Some(psi), Some(alpha), Some(mixer), _) => {
                let eps = params.probe.as_ref().map_or(cfg.epsilon, |p| p.epsilon);
                let v = psi.apply(g, features)?;
                let sp = g.softplus(alpha);
                let sigma = g.offset(sp, eps);
                let dz = mixer.apply(g, v)?;
                let patterns = cfg.pattern_set()?;
                let u_epi = epistemic_on_graph(g, logits, v, sigma, mixer, &patterns)?;
                let u_probe = mean_square_on_graph(g, v);
                let u_res = mean_square_on_graph(g, dz);
                (Some(v), Some(dz), u_epi, u_probe, u_res)
            }
            (_, _, _, Some(direct)) => {
                let d = direct.apply(g, features)?;
                let u_epi = g.softplus(d);
                let u_probe = g.constant(one.clone(), zeros())?;
                let u_res = g.constant(one.clone(), zeros())?;
                (None, None, u_epi, u_probe, u_res)
            }
            _ => return Err(Error::InvalidArgument("head has neither probes nor a direct head".into())),
        };

    let aleatoric = match &vars.psi_ale {
        Some(a) => Some(aleatoric_on_graph(g, features, a)?),
        None => None,
    };
    let calibration = match cfg.variant {
        MapVariant::RankingOnly => g.constant(one.clone(), zeros())?,
        _ => calibration_on_graph(
            g,
            epistemic,
            residual_energy,
            aleatoric,
            margin,
            &vars.psi_cal,
            params.maps.psi_cal.in_dim,
        )?,
    };
    let tempered_logits = temper_on_graph(g, logits, calibration)?;
    let anchor = anchor_on_graph(g, epistemic, residual_energy, calibration, entropy, weight, nc)?;
    let [a, b, c] = vars.rank;
    let ranking = ranking_on_graph(g, anchor, weight, a, b, c)?;
    let score = match cfg.variant {
        MapVariant::CalibrationOnly => calibration,
        _ => ranking,
    };
    Ok(ForwardVars {
        logits,
        features,
        probe_responses,
        base_delta,
        epistemic,
        aleatoric,
        calibration,
        probe_energy,
        residual_energy,
        margin,
        weight,
        entropy,
        tempered_logits,
        anchor,
        ranking,
        score,
        num_classes: nc,
    })
}
