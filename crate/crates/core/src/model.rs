//! The trainable bundle: frozen encoder, aligner and expert bank, plus the
//! forward-only registration used at calibration and scoring time.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{BackboneFeatures, Encoder, EncoderConfig, LevelAdapter, LEVELS};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{loss_ncc, loss_sim, loss_smooth};
use crate::lra::{cascade_align, Aligner, LraConfig};
use crate::numerics::{Tape, Tensor, TensorArchive};
use crate::oks::{OksBank, OksConfig, SynergyExpert};

/// Projected features of one image, `C_l×H_l×W_l` per level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatures {
    pub levels: [Tensor; LEVELS],
}

/// Raw registration losses of one (anchor, query) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairTerms {
    pub sim: f64,
    pub ncc: f64,
    pub smooth: f64,
}

impl PairTerms {
    pub fn as_array(&self) -> [f64; 3] {
        [self.sim, self.ncc, self.smooth]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub planes: Vec<String>,
    pub encoder: Encoder,
    pub aligner: Aligner,
    pub oks: OksBank,
}

fn encode_name(name: &str) -> Tensor {
    Tensor::from_fn([name.len()], |i| name.as_bytes()[i] as f64)
}

fn decode_name(t: &Tensor) -> Result<String> {
    let bytes = t.data().iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::format("plane name is not UTF-8"))
}

impl Model {
    pub fn new(planes: Vec<String>, enc: &EncoderConfig, lra: &LraConfig, oks: &OksConfig) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::config("a model needs at least one plane"));
        }
        let encoder = Encoder::build(enc)?;
        let aligner = Aligner::new(encoder.channels(), lra)?;
        let oks = OksBank::new(encoder.channels(), planes.len(), oks)?;
        Ok(Self { planes, encoder, aligner, oks })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        ar.insert_scalar("model.planes", self.planes.len() as f64);
        for (c, name) in self.planes.iter().enumerate() {
            ar.insert(format!("model.plane{c}.name"), encode_name(name));
        }
        self.encoder.save(&mut ar);
        self.aligner.save(&mut ar);
        self.oks.save(&mut ar);
        ar
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let n = ar.get_scalar("model.planes")? as usize;
        let planes = (0..n).map(|c| decode_name(ar.get(&format!("model.plane{c}.name"))?)).collect::<Result<_>>()?;
        let encoder = Encoder::load(ar)?;
        let aligner = Aligner::load(ar)?;
        let oks = OksBank::load(ar, OksConfig::default().seed)?;
        if oks.n_planes() != n {
            return Err(Error::format(format!("{n} plane names for {} plane experts", oks.n_planes())));
        }
        Ok(Self { planes, encoder, aligner, oks })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive().to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    /// Snaps every weight to its stored (f32) precision, so an in-memory
    /// model scores exactly like its reloaded checkpoint.
    pub fn rounded(&self) -> Result<Self> {
        let mut m = Self::from_archive(&TensorArchive::from_bytes(&self.to_bytes()?)?)?;
        m.oks.cfg = self.oks.cfg.clone();
        Ok(m)
    }

    /// Hex sha256 of the checkpoint bytes.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn plane_index(&self, name: &str) -> Result<usize> {
        self.planes.iter().position(|p| p == name).ok_or_else(|| Error::config(format!("plane {name:?} is not known to the model")))
    }

    pub fn synergy(&self, feats: &BackboneFeatures) -> Result<Vec<SynergyExpert>> {
        self.oks.synergy(feats)
    }

    /// Projected features with the image's own synergy experts.
    pub fn features(&self, img: &Image) -> Result<LevelFeatures> {
        let feats = self.encoder.backbone(img)?;
        self.features_from(&feats)
    }

    pub fn features_from(&self, feats: &BackboneFeatures) -> Result<LevelFeatures> {
        let synergy = self.synergy(feats)?;
        let tape = Tape::new();
        let adapters: Vec<Option<LevelAdapter<'_>>> = synergy
            .iter()
            .map(|e| match (&e.a, &e.b) {
                (Some(a), Some(b)) => Some(LevelAdapter { a: tape.constant(a.clone()), b: tape.constant(b.clone()), scale: e.scale }),
                _ => None,
            })
            .collect();
        let out = self.encoder.extract(&tape, feats, &[adapters[0], adapters[1], adapters[2]])?;
        Ok(LevelFeatures { levels: out.map(|v| (*v.value()).clone()) })
    }

    /// Forward-only registration of `query` onto `anchor`.
    pub fn register(&self, anchor: &LevelFeatures, query: &LevelFeatures) -> Result<PairTerms> {
        let tape = Tape::new();
        let a = anchor.levels.clone().map(|t| tape.constant(t));
        let b = query.levels.clone().map(|t| tape.constant(t));
        let nets = self.aligner.bind(&tape, false);
        let al = cascade_align(&nets, self.aligner.mode, self.aligner.warp_both, &a, &b)?;
        Ok(PairTerms { sim: loss_sim(&al.a, &al.b)?.item(), ncc: loss_ncc(&al.a, &al.b)?.item(), smooth: loss_smooth(&al.thetas)?.item() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::render_archetype;

    fn small() -> Model {
        let enc = EncoderConfig { channels: [4, 8, 8], seed: 0 };
        Model::new(vec!["a".into(), "b".into()], &enc, &LraConfig::default(), &OksConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_and_hash() {
        let m = small().rounded().unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_archive(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.hash().unwrap(), m.hash().unwrap());
        assert_eq!(back.planes, ["a", "b"]);
        assert_eq!(m.plane_index("b").unwrap(), 1);
        assert!(m.plane_index("c").is_err());
    }

    #[test]
    fn self_registration_is_ideal() {
        let m = small();
        let img = render_archetype(0, 32, 1).unwrap();
        let f = m.features(&img).unwrap();
        let t = m.register(&f, &f).unwrap();
        assert_eq!(t.smooth, 0.0);
        assert!((t.ncc + 3.0).abs() < 1e-9, "{t:?}");
        // positions where ReLU zeroed every channel contribute a cosine of 0
        assert!(t.sim < -2.5 && t.sim >= -3.0 - 1e-9, "{t:?}");
    }
}
