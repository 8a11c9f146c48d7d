//! Runs the analysis grid over the layers of a bundle.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sqnrkit::analysis::{analyze_layer, validate_layer, Flag};
use sqnrkit::transforms::{channel_scaling, group_layers, transform_layers};
use sqnrkit::{
    ActivationSet, Error, Granularity, LinearLayer, QuantConfig, QuantRange, RangePolicy, Result, Symmetry,
    TensorBundle, TransformKind, TransformSpec,
};

use crate::report::ReportRow;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSettings {
    pub sym_w: Symmetry,
    pub sym_a: Symmetry,
    /// Static activation ranges by group; one range means per-tensor.
    pub static_a: Option<BTreeMap<String, Vec<QuantRange>>>,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            sym_w: Symmetry::Symmetric,
            sym_a: Symmetry::Asymmetric,
            static_a: None,
        }
    }
}

impl QuantSettings {
    pub fn configs(&self, group: &str, b_w: u32, b_x: u32) -> Result<(QuantConfig, QuantConfig)> {
        let cfg_w = QuantConfig::weights(b_w).with_symmetry(self.sym_w);
        let mut cfg_a = QuantConfig::activations(b_x).with_symmetry(self.sym_a);
        if let Some(ranges) = &self.static_a {
            let r = ranges
                .get(group)
                .ok_or_else(|| Error::Config(format!("static ranges missing for activation group {group}")))?;
            if r.len() == 1 {
                cfg_a = cfg_a.with_granularity(Granularity::PerTensor);
            }
            cfg_a = cfg_a.with_policy(RangePolicy::Static(r.clone()));
        }
        cfg_w.validate()?;
        cfg_a.validate()?;
        Ok((cfg_w, cfg_a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub quant: QuantSettings,
    pub transforms: Vec<TransformKind>,
    /// `(b_w, b_x)` pairs.
    pub bit_pairs: Vec<(u32, u32)>,
    pub eps: f64,
    /// Adds noise-model statistics and the decorrelation flag.
    pub validate: bool,
}

impl GridConfig {
    pub fn check(&self) -> Result<()> {
        if self.transforms.is_empty() {
            return Err(Error::Config("transform list is empty".into()));
        }
        if self.bit_pairs.is_empty() {
            return Err(Error::Config("bit pair list is empty".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be a finite value >= 0, got {}", self.eps)));
        }
        if self.quant.static_a.is_some() && self.transforms.iter().any(|t| *t != TransformKind::Identity) {
            return Err(Error::Config(
                "static activation ranges are calibrated in the untransformed space; use them with transform none only"
                    .into(),
            ));
        }
        for &(bw, bx) in &self.bit_pairs {
            QuantConfig::weights(bw).validate()?;
            QuantConfig::activations(bx).validate()?;
        }
        Ok(())
    }
}

/// Layers grouped by the activations they read, in manifest order.
pub fn layer_groups(bundle: &TensorBundle) -> Result<Vec<(String, ActivationSet, Vec<LinearLayer>)>> {
    let mut groups: Vec<(String, Vec<LinearLayer>)> = Vec::new();
    for (layer, input) in bundle.layer_pairs()? {
        match groups.iter_mut().find(|(g, _)| *g == input) {
            Some((_, v)) => v.push(layer),
            None => groups.push((input, vec![layer])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("bundle holds no weight tensors".into()));
    }
    groups
        .into_iter()
        .map(|(g, layers)| Ok((g.clone(), bundle.activations(&g)?, layers)))
        .collect()
}

fn prefixed(prefix: Option<&str>, name: &str) -> String {
    match prefix {
        Some(p) => format!("{p}:{name}"),
        None => name.to_string(),
    }
}

/// Every `(layer, transform, bit pair)` row for one bundle.
pub fn run_bundle(bundle: &TensorBundle, prefix: Option<&str>, grid: &GridConfig) -> Result<Vec<ReportRow>> {
    grid.check()?;
    let groups = layer_groups(bundle)?;
    let tasks: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..grid.transforms.len()).map(move |t| (g, t)))
        .collect();
    let per_task: Vec<Vec<ReportRow>> = tasks
        .par_iter()
        .map(|&(g, ti)| {
            let (name, x, layers) = &groups[g];
            let kind = grid.transforms[ti];
            let refs: Vec<&LinearLayer> = layers.iter().collect();
            let stacked = group_layers(&refs)?;
            let t = TransformSpec::new(kind).with_eps(grid.eps).calibrate(stacked.weight(), x)?;
            let mut extra = Vec::new();
            if let TransformKind::ChannelScaling { alpha } = kind {
                if !channel_scaling(stacked.weight(), x, alpha)?.flagged.is_empty() {
                    extra.push(Flag::DegenerateChannels);
                }
            }
            let (layers_t, x_t) = transform_layers(layers, x, &t)?;
            let jobs: Vec<(&LinearLayer, (u32, u32))> = layers_t
                .iter()
                .flat_map(|l| grid.bit_pairs.iter().map(move |&bits| (l, bits)))
                .collect();
            jobs.par_iter()
                .map(|&(layer, (bw, bx))| {
                    let (cfg_w, cfg_a) = grid.quant.configs(name, bw, bx)?;
                    let (mut analysis, act_noise, w_noise) = if grid.validate {
                        let v = validate_layer(layer, &x_t, &cfg_w, &cfg_a)?;
                        (v.analysis, v.activation_noise, v.weight_noise)
                    } else {
                        (analyze_layer(layer, &x_t, &cfg_w, &cfg_a)?, None, None)
                    };
                    analysis.flags.extend(extra.iter().copied());
                    Ok(ReportRow {
                        layer: prefixed(prefix, layer.name()),
                        group: Some(prefixed(prefix, name)),
                        transform: kind.to_string(),
                        transform_index: ti,
                        analysis,
                        activation_noise: act_noise,
                        weight_noise: w_noise,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_task.into_iter().flatten().collect())
}
