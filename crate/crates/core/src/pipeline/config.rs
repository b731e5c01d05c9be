//! Flat `key = value` configuration text and the pipeline settings.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blur::ExposureModel;
use crate::deblur::DeblurParams;
use crate::energy::EnergyWeights;
use crate::error::{Error, Result};
use crate::imaging::io::read_text;
use crate::sceneflow::{MatchParams, RansacParams, TrwsOptions};
use crate::superpixels::SlicParams;

/// Parsed `key = value` lines. `#` starts a comment; keys must be unique.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.to_string(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(|(_, v)| v.as_str());
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.bad(key, v)),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn set_from<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *target = v;
        }
        Ok(())
    }

    /// Whitespace-separated list of exactly `n` numbers.
    pub fn floats(&self, key: &str, n: usize) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let vals: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(vals) if vals.len() == n => Ok(Some(vals)),
            _ => Err(self.bad(key, v)),
        }
    }

    pub fn require_floats(&self, key: &str, n: usize) -> Result<Vec<f64>> {
        self.floats(key, n)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    fn bad(&self, key: &str, v: &str) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        Error::Config(format!("line {line}: invalid value `{v}` for `{key}`"))
    }

    /// Fails on keys that were never read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.entries.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// Accumulates `key = value` lines in insertion order.
#[derive(Debug, Clone, Default)]
pub struct KvWriter {
    text: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, c: &str) -> &mut Self {
        self.text.push_str("# ");
        self.text.push_str(c);
        self.text.push('\n');
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.text.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn floats(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let v: Vec<String> = values.iter().map(|x| x.to_string()).collect();
        self.put(key, v.join(" "))
    }

    pub fn finish(&self) -> String {
        self.text.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub weights: EnergyWeights,
    pub exposure: ExposureModel,
    pub slic_count: usize,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    /// Smoothness of the initial depth fill.
    pub fill_beta: f64,
    pub matching: MatchParams,
    pub ransac: RansacParams,
    pub trws: TrwsOptions,
    /// Maximum proposals per superpixel.
    pub label_max: usize,
    /// Proposal and TRW-S rounds per scene step.
    pub scene_rounds: usize,
    pub deblur: DeblurParams,
    pub outer_iterations: usize,
    pub seed: u64,
    /// Virtual stereo baseline (m) for the disparity error metric.
    pub baseline: f64,
    /// Use only the next frame (one temporal direction).
    pub two_frame: bool,
    /// Restore color channels after the last iteration.
    pub restore_color: bool,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: EnergyWeights::default(),
            exposure: ExposureModel::default(),
            slic_count: 200,
            slic_compactness: 10.0,
            slic_iterations: 10,
            fill_beta: 1.0,
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            trws: TrwsOptions::default(),
            label_max: 16,
            scene_rounds: 3,
            deblur: DeblurParams::default(),
            outer_iterations: 6,
            seed: 0,
            baseline: 0.54,
            two_frame: false,
            restore_color: true,
            dataset: None,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            target_count: self.slic_count,
            compactness: self.slic_compactness,
            iterations: self.slic_iterations,
        }
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            seed: self.seed,
            ..self.ransac
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.deblur.steps.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.outer_iterations < 1 {
            return bad("outer_iterations must be >= 1");
        }
        if !(self.baseline > 0.0) {
            return bad("baseline must be > 0");
        }
        if self.slic_count == 0 || self.label_max == 0 || self.scene_rounds == 0 {
            return bad("slic_count, label_max and scene_rounds must be >= 1");
        }
        if !(self.fill_beta > 0.0) {
            return bad("fill_beta must be > 0");
        }
        ExposureModel::new(self.exposure.n, self.exposure.tau)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        let w = &mut c.weights;
        for (key, field) in [
            ("w1", &mut w.w1),
            ("w2", &mut w.w2),
            ("w3", &mut w.w3),
            ("lambda", &mut w.lambda),
            ("c1", &mut w.c1),
            ("c2", &mut w.c2),
            ("c3", &mut w.c3),
            ("alpha1", &mut w.alpha1),
            ("alpha2", &mut w.alpha2),
            ("alpha3", &mut w.alpha3),
            ("tv_weight", &mut w.tv_weight),
            ("p", &mut w.p),
        ] {
            kv.set_from(key, field)?;
        }
        let (mut n, mut tau) = (c.exposure.n, c.exposure.tau);
        kv.set_from("exposure_n", &mut n)?;
        kv.set_from("exposure_tau", &mut tau)?;
        c.exposure = ExposureModel::new(n, tau)?;
        kv.set_from("slic_count", &mut c.slic_count)?;
        kv.set_from("slic_compactness", &mut c.slic_compactness)?;
        kv.set_from("slic_iterations", &mut c.slic_iterations)?;
        kv.set_from("fill_beta", &mut c.fill_beta)?;
        let m = &mut c.matching;
        kv.set_from("match_max_corners", &mut m.max_corners)?;
        kv.set_from("match_nms_radius", &mut m.nms_radius)?;
        kv.set_from("match_patch_radius", &mut m.patch_radius)?;
        kv.set_from("match_search_radius", &mut m.search_radius)?;
        kv.set_from("match_min_zncc", &mut m.min_zncc)?;
        kv.set_from("match_uniqueness_margin", &mut m.uniqueness_margin)?;
        kv.set_from("match_min_response", &mut m.min_response)?;
        let r = &mut c.ransac;
        kv.set_from("ransac_iterations", &mut r.iterations)?;
        kv.set_from("ransac_threshold", &mut r.threshold)?;
        kv.set_from("ransac_depth_tolerance", &mut r.depth_tolerance)?;
        kv.set_from("ransac_min_inliers", &mut r.min_inliers)?;
        kv.set_from("ransac_max_motions", &mut r.max_motions)?;
        kv.set_from("scene_rounds", &mut c.scene_rounds)?;
        kv.set_from("trws_max_sweeps", &mut c.trws.max_sweeps)?;
        kv.set_from("trws_tolerance", &mut c.trws.tolerance)?;
        kv.set_from("label_max", &mut c.label_max)?;
        let d = &mut c.deblur;
        kv.set_from("gamma", &mut d.steps.gamma)?;
        kv.set_from("mu", &mut d.steps.mu)?;
        kv.set_from("eta", &mut d.steps.eta)?;
        kv.set_from("inner_iterations", &mut d.inner_iterations)?;
        kv.set_from("passes", &mut d.passes)?;
        kv.set_from("cg_tolerance", &mut d.cg_tolerance)?;
        kv.set_from("cg_max_iterations", &mut d.cg_max_iterations)?;
        kv.set_from("outer_iterations", &mut c.outer_iterations)?;
        kv.set_from("seed", &mut c.seed)?;
        kv.set_from("baseline", &mut c.baseline)?;
        kv.set_from("two_frame", &mut c.two_frame)?;
        kv.set_from("restore_color", &mut c.restore_color)?;
        c.dataset = kv.get::<String>("dataset")?.map(PathBuf::from);
        c.output = kv.get::<String>("output")?.map(PathBuf::from);
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut out = KvWriter::new();
        out.put("w1", w.w1)
            .put("w2", w.w2)
            .put("w3", w.w3)
            .put("lambda", w.lambda)
            .put("c1", w.c1)
            .put("c2", w.c2)
            .put("c3", w.c3)
            .put("alpha1", w.alpha1)
            .put("alpha2", w.alpha2)
            .put("alpha3", w.alpha3)
            .put("tv_weight", w.tv_weight)
            .put("p", w.p)
            .put("exposure_n", self.exposure.n)
            .put("exposure_tau", self.exposure.tau)
            .put("slic_count", self.slic_count)
            .put("slic_compactness", self.slic_compactness)
            .put("slic_iterations", self.slic_iterations)
            .put("fill_beta", self.fill_beta)
            .put("match_max_corners", self.matching.max_corners)
            .put("match_nms_radius", self.matching.nms_radius)
            .put("match_patch_radius", self.matching.patch_radius)
            .put("match_search_radius", self.matching.search_radius)
            .put("match_min_zncc", self.matching.min_zncc)
            .put("match_uniqueness_margin", self.matching.uniqueness_margin)
            .put("match_min_response", self.matching.min_response)
            .put("ransac_iterations", self.ransac.iterations)
            .put("ransac_threshold", self.ransac.threshold)
            .put("ransac_depth_tolerance", self.ransac.depth_tolerance)
            .put("ransac_min_inliers", self.ransac.min_inliers)
            .put("ransac_max_motions", self.ransac.max_motions)
            .put("scene_rounds", self.scene_rounds)
            .put("trws_max_sweeps", self.trws.max_sweeps)
            .put("trws_tolerance", self.trws.tolerance)
            .put("label_max", self.label_max)
            .put("gamma", self.deblur.steps.gamma)
            .put("mu", self.deblur.steps.mu)
            .put("eta", self.deblur.steps.eta)
            .put("inner_iterations", self.deblur.inner_iterations)
            .put("passes", self.deblur.passes)
            .put("cg_tolerance", self.deblur.cg_tolerance)
            .put("cg_max_iterations", self.deblur.cg_max_iterations)
            .put("outer_iterations", self.outer_iterations)
            .put("seed", self.seed)
            .put("baseline", self.baseline)
            .put("two_frame", self.two_frame)
            .put("restore_color", self.restore_color);
        if let Some(p) = &self.dataset {
            out.put("dataset", p.display());
        }
        if let Some(p) = &self.output {
            out.put("output", p.display());
        }
        out.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = PipelineConfig::parse("# weights\nc3 = 20 # blur\nouter_iterations=3\n\ntwo_frame = true\n").unwrap();
        assert_eq!(c.weights.c3, 20.0);
        assert_eq!(c.outer_iterations, 3);
        assert!(c.two_frame);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "c3 = abc",
            "nonsense = 1",
            "c3 = 1\nc3 = 2",
            "just a line",
            "outer_iterations = 0",
            "baseline = -1",
        ] {
            assert!(
                matches!(PipelineConfig::parse(text), Err(Error::Config(_)) | Err(Error::InvalidParameter(_))),
                "{text}"
            );
        }
    }
}
