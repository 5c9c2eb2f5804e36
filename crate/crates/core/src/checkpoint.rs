//! Checkpoint files: a magic tag, a JSON metadata block and named tensors.
//!
//! ```text
//! b"SKDCKPT1", u64 LE metadata length, metadata (UTF-8 JSON), tensor block
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use stainkd_nn::io::{read_tensors, write_tensors};
use stainkd_nn::{Adam, ParamSet, Tensor};

use crate::align::RegistrationNet;
use crate::enhance::{CdfMode, IlluminanceCdf, LightEnhancer};
use crate::error::{file_err, Result, StainError};
use crate::nets::Network;
use crate::student::{StudentNets, StudentSpec};
use crate::teacher::{Colorizer, ColorizerSpec, Teacher};
use crate::train::StudentOptimizers;

const MAGIC: &[u8; 8] = b"SKDCKPT1";

fn bad(detail: impl Into<String>) -> StainError {
    StainError::Format { what: "checkpoint", detail: detail.into() }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| bad(format!("missing `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let head = format!("{prefix}/");
        let entries: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&head).map(|n| (n.to_string(), t.clone())))
            .collect();
        params.load(entries).map_err(|e| bad(format!("{prefix}: {e}")))
    }

    pub fn add_adam(&mut self, prefix: &str, adam: &Adam) {
        let (step, m, v) = adam.state();
        self.tensors.push((format!("{prefix}/step"), Tensor::scalar(step as f64)));
        for (i, t) in m.into_iter().enumerate() {
            self.tensors.push((format!("{prefix}/m{i}"), t));
        }
        for (i, t) in v.into_iter().enumerate() {
            self.tensors.push((format!("{prefix}/v{i}"), t));
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam) -> Result<()> {
        let step = self.tensor(&format!("{prefix}/step"))?.item() as u64;
        let collect = |kind: &str| -> Vec<Tensor> {
            (0..)
                .map_while(|i| self.tensor(&format!("{prefix}/{kind}{i}")).ok().cloned())
                .collect()
        };
        adam.restore(step, collect("m"), collect("v")).map_err(|e| bad(format!("{prefix}: {e}")))
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(MAGIC)?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        write_tensors(out, &self.tensors)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
        let mut meta = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let meta = serde_json::from_slice(&meta)?;
        let tensors = read_tensors(input).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted save leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(file_err(parent))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf).map_err(file_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(file_err(path))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn put_enhancer(ck: &mut Checkpoint, e: &LightEnhancer) -> Result<()> {
    ck.set("c_d", e.c_d.to_table())?;
    ck.set("c_b", e.c_b.to_table())?;
    ck.set("cdf_mode", e.mode)
}

fn get_enhancer(ck: &Checkpoint) -> Result<LightEnhancer> {
    Ok(LightEnhancer::new(
        IlluminanceCdf::from_table(&ck.get::<String>("c_d")?)?,
        IlluminanceCdf::from_table(&ck.get::<String>("c_b")?)?,
        ck.get::<CdfMode>("cdf_mode")?,
    ))
}

pub fn teacher_checkpoint(teacher: &Teacher) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set("kind", "teacher")?;
    put_enhancer(&mut ck, &teacher.enhancer)?;
    ck.set("colorizer", teacher.colorizer.spec())?;
    ck.add_params("colorizer", teacher.colorizer.net().params());
    Ok(ck)
}

pub fn restore_teacher(ck: &Checkpoint) -> Result<Teacher> {
    expect_kind(ck, &["teacher"])?;
    let spec: ColorizerSpec = ck.get("colorizer")?;
    let mut colorizer = Colorizer::new(spec, 0)?;
    ck.load_params("colorizer", colorizer.net_mut().params_mut())?;
    Ok(Teacher { enhancer: get_enhancer(ck)?, colorizer })
}

fn expect_kind(ck: &Checkpoint, kinds: &[&str]) -> Result<String> {
    let kind: String = ck.get("kind")?;
    if !kinds.contains(&kind.as_str()) {
        return Err(bad(format!("expected a {} checkpoint, found `{kind}`", kinds.join(" or "))));
    }
    Ok(kind)
}

/// Everything needed to resume or deploy a student run. `step` is the
/// number of completed steps.
#[derive(Debug)]
pub struct StudentState {
    pub spec: StudentSpec,
    pub registration: Option<(usize, usize)>,
    pub enhancer: LightEnhancer,
    pub nets: StudentNets,
    pub r: Option<RegistrationNet>,
    pub opt: StudentOptimizers,
    pub step: u64,
}

pub fn student_checkpoint(
    spec: &StudentSpec,
    enhancer: &LightEnhancer,
    nets: &StudentNets,
    r: Option<(&RegistrationNet, usize, usize)>,
    opt: &StudentOptimizers,
    step: u64,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set("kind", if r.is_some() { "paired" } else { "unpaired" })?;
    ck.set("step", step)?;
    ck.set("student", spec)?;
    ck.set("registration", r.map(|(_, w, d)| (w, d)))?;
    put_enhancer(&mut ck, enhancer)?;
    ck.add_params("g", nets.g.params());
    ck.add_params("f", nets.f.params());
    ck.add_params("d", nets.d.params());
    ck.add_adam("opt.g", &opt.g);
    ck.add_adam("opt.f", &opt.f);
    ck.add_adam("opt.d", &opt.d);
    if let (Some(d_x), Some(o)) = (&nets.d_x, &opt.d_x) {
        ck.add_params("d_x", d_x.params());
        ck.add_adam("opt.d_x", o);
    }
    if let (Some((r, _, _)), Some(o)) = (r, &opt.r) {
        ck.add_params("r", r.params());
        ck.add_adam("opt.r", o);
    }
    Ok(ck)
}

pub fn restore_student(ck: &Checkpoint) -> Result<StudentState> {
    expect_kind(ck, &["unpaired", "paired"])?;
    let spec: StudentSpec = ck.get("student")?;
    let registration: Option<(usize, usize)> = ck.get("registration")?;
    let mut nets = StudentNets::new(&spec, 0)?;
    let mut r = registration.map(|(w, d)| RegistrationNet::new(w, d, 0)).transpose()?;
    ck.load_params("g", nets.g.params_mut())?;
    ck.load_params("f", nets.f.params_mut())?;
    ck.load_params("d", nets.d.params_mut())?;
    if let Some(d_x) = nets.d_x.as_mut() {
        ck.load_params("d_x", d_x.params_mut())?;
    }
    if let Some(r) = r.as_mut() {
        ck.load_params("r", r.params_mut())?;
    }
    let mut opt = StudentOptimizers::new(&nets, r.as_ref());
    ck.load_adam("opt.g", &mut opt.g)?;
    ck.load_adam("opt.f", &mut opt.f)?;
    ck.load_adam("opt.d", &mut opt.d)?;
    if let Some(o) = opt.d_x.as_mut() {
        ck.load_adam("opt.d_x", o)?;
    }
    if let Some(o) = opt.r.as_mut() {
        ck.load_adam("opt.r", o)?;
    }
    Ok(StudentState { spec, registration, enhancer: get_enhancer(ck)?, nets, r, opt, step: ck.get("step")? })
}
