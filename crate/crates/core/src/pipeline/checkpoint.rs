//! Flat named-array archives for adapter and fused checkpoints.
//!
//! Layout: a plain-text key-value header (one `key value` pair per line,
//! terminated by `END-HEADER`), then a little-endian binary body — a `u32`
//! array count followed by records of `u32` name length, the UTF-8 name,
//! `u32` rows, `u32` cols, and `rows*cols` `f64` entries in row-major
//! order. Values are stored as `f64`, so `f64` pipelines round-trip
//! bit-exactly.
//!
//! Array keys: `{layer}.kron.A` / `{layer}.kron.B` / `{layer}.m` for the
//! Kronecker families, `{layer}.lora.A` / `{layer}.lora.B` for LoRA,
//! `{layer}.delta` for fused dense updates, `concept.{name}.v_rand` /
//! `concept.{name}.v_class` for token embeddings, and `image_adapter.w` /
//! `image_adapter.b`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::adapters::{Adapter, AdapterKind, KronaAdapter, KronaWedAdapter, LoraAdapter};
use crate::concepts::ConceptRegistry;
use crate::error::{Error, Result};
use crate::objectives::ImageAdapter;
use crate::tensor::Mat;
use crate::testbed::Denoiser;
use crate::Scalar;

/// Archive format identifier, bumped on breaking layout changes.
pub const FORMAT: &str = "showflow-archive/1";

// ---------------------------------------------------------------------------
// raw archive
// ---------------------------------------------------------------------------

/// A named-array archive: ordered header metadata plus named matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<S: Scalar> {
    /// Header entries in file order; keys may repeat.
    pub meta: Vec<(String, String)>,
    /// Arrays sorted by name.
    pub arrays: BTreeMap<String, Mat<S>>,
}

impl<S: Scalar> Default for Archive<S> {
    fn default() -> Self {
        Archive { meta: Vec::new(), arrays: BTreeMap::new() }
    }
}

impl<S: Scalar> Archive<S> {
    /// First header value under `key`.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Every header value under `key`, in file order.
    pub fn meta_all(&self, key: &str) -> Vec<&str> {
        self.meta.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    /// Serializes header and body into one buffer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(format!("format {FORMAT}\n").into_bytes());
        for (k, v) in &self.meta {
            out.extend(format!("{k} {v}\n").into_bytes());
        }
        out.extend(b"END-HEADER\n");
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((m.rows() as u32).to_le_bytes());
            out.extend((m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                out.extend(v.to_f64().to_le_bytes());
            }
        }
        out
    }

    /// Parses a buffer produced by [`Archive::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut meta = Vec::new();
        let mut saw_format = false;
        loop {
            let rest = &bytes[cursor..];
            let eol = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::data("archive header is not terminated"))?;
            let line = std::str::from_utf8(&rest[..eol])
                .map_err(|_| Error::data("archive header is not UTF-8"))?;
            cursor += eol + 1;
            if line == "END-HEADER" {
                break;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("malformed header line '{line}'")))?;
            if key == "format" {
                if value != FORMAT {
                    return Err(Error::data(format!(
                        "unsupported archive format '{value}', expected '{FORMAT}'"
                    )));
                }
                saw_format = true;
            } else {
                meta.push((key.to_string(), value.to_string()));
            }
        }
        if !saw_format {
            return Err(Error::data("archive header lacks a format line"));
        }
        let mut take = |n: usize| -> Result<&[u8]> {
            let chunk = bytes
                .get(cursor..cursor + n)
                .ok_or_else(|| Error::data("archive body is truncated"))?;
            cursor += n;
            Ok(chunk)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| Error::data("array name is not UTF-8"))?
                .to_string();
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(S::of(f64::from_le_bytes(take(8)?.try_into().unwrap())));
            }
            if arrays.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
                return Err(Error::data(format!("array '{name}' appears twice")));
            }
        }
        if cursor != bytes.len() {
            return Err(Error::data("archive has trailing bytes after the last array"));
        }
        Ok(Archive { meta, arrays })
    }

    /// Writes the archive to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads an archive from a file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn array(&self, name: &str) -> Result<&Mat<S>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::data(format!("archive is missing array '{name}'")))
    }
}

// ---------------------------------------------------------------------------
// concept records
// ---------------------------------------------------------------------------

/// A trained concept: its two token embeddings plus naming metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedConcept<S: Scalar> {
    pub name: String,
    pub class_word: String,
    /// `1 x width` identity token embedding.
    pub v_rand: Mat<S>,
    /// `1 x width` class token embedding.
    pub v_class: Mat<S>,
}

fn push_concepts<S: Scalar>(archive: &mut Archive<S>, concepts: &[TrainedConcept<S>]) {
    for c in concepts {
        archive.meta.push(("concept".to_string(), format!("{} {}", c.name, c.class_word)));
        archive.arrays.insert(format!("concept.{}.v_rand", c.name), c.v_rand.clone());
        archive.arrays.insert(format!("concept.{}.v_class", c.name), c.v_class.clone());
    }
}

fn pull_concepts<S: Scalar>(archive: &Archive<S>) -> Result<Vec<TrainedConcept<S>>> {
    archive
        .meta_all("concept")
        .into_iter()
        .map(|record| {
            let (name, class_word) = record
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("malformed concept record '{record}'")))?;
            Ok(TrainedConcept {
                name: name.to_string(),
                class_word: class_word.to_string(),
                v_rand: archive.array(&format!("concept.{name}.v_rand"))?.clone(),
                v_class: archive.array(&format!("concept.{name}.v_class"))?.clone(),
            })
        })
        .collect()
}

/// Registers every stored concept in a registry, preserving file order.
pub fn restore_concepts<S: Scalar>(
    registry: &mut ConceptRegistry<S>,
    concepts: &[TrainedConcept<S>],
) -> Result<()> {
    for c in concepts {
        registry.restore_concept(&c.name, &c.class_word, c.v_rand.clone(), c.v_class.clone())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// adapter checkpoints
// ---------------------------------------------------------------------------

/// Output of single-concept training: per-layer adapters, the concept's
/// token embeddings, and the image adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint<S: Scalar> {
    pub kind: AdapterKind,
    /// Kronecker factor size or LoRA rank the adapters were built with.
    pub factor: usize,
    /// Per-layer adapters keyed by layer id.
    pub adapters: BTreeMap<String, Adapter<S>>,
    /// Concepts trained into this checkpoint (one for single-concept runs).
    pub concepts: Vec<TrainedConcept<S>>,
    /// Identity-irrelevant conditioning head (unused at generation time).
    pub image_adapter: ImageAdapter<S>,
}

impl<S: Scalar> AdapterCheckpoint<S> {
    /// Packs the checkpoint into an archive.
    pub fn to_archive(&self) -> Archive<S> {
        let mut archive = Archive::default();
        archive.meta.push(("content".to_string(), "adapter".to_string()));
        archive.meta.push(("adapter_kind".to_string(), self.kind.to_string()));
        archive.meta.push(("adapter_factor".to_string(), self.factor.to_string()));
        for (layer, adapter) in &self.adapters {
            match adapter {
                Adapter::KronaWed(a) => {
                    archive.arrays.insert(format!("{layer}.kron.A"), a.a.clone());
                    archive.arrays.insert(format!("{layer}.kron.B"), a.b.clone());
                    archive.arrays.insert(format!("{layer}.m"), a.m.clone());
                }
                Adapter::Krona(a) => {
                    archive.arrays.insert(format!("{layer}.kron.A"), a.a.clone());
                    archive.arrays.insert(format!("{layer}.kron.B"), a.b.clone());
                }
                Adapter::Lora(a) => {
                    archive.arrays.insert(format!("{layer}.lora.A"), a.a.clone());
                    archive.arrays.insert(format!("{layer}.lora.B"), a.b.clone());
                }
            }
            archive.meta.push((
                "layer".to_string(),
                format!("{layer} {} {}", adapter.kind(), adapter.param_count()),
            ));
        }
        push_concepts(&mut archive, &self.concepts);
        archive.arrays.insert("image_adapter.w".to_string(), self.image_adapter.w.clone());
        archive.arrays.insert("image_adapter.b".to_string(), self.image_adapter.b.clone());
        archive
    }

    /// Unpacks a checkpoint from an archive.
    pub fn from_archive(archive: &Archive<S>) -> Result<Self> {
        match archive.meta("content") {
            Some("adapter") => {}
            other => {
                return Err(Error::data(format!(
                    "expected an adapter checkpoint, found content '{}'",
                    other.unwrap_or("<missing>")
                )))
            }
        }
        let kind_text = archive
            .meta("adapter_kind")
            .ok_or_else(|| Error::data("adapter checkpoint lacks adapter_kind"))?;
        let kind: AdapterKind = serde_json::from_value(serde_json::Value::String(
            kind_text.to_string(),
        ))
        .map_err(|_| Error::data(format!("unknown adapter kind '{kind_text}'")))?;
        let factor: usize = archive
            .meta("adapter_factor")
            .ok_or_else(|| Error::data("adapter checkpoint lacks adapter_factor"))?
            .parse()
            .map_err(|_| Error::data("adapter_factor is not an integer"))?;
        let mut adapters = BTreeMap::new();
        for record in archive.meta_all("layer") {
            let layer = record
                .split_whitespace()
                .next()
                .ok_or_else(|| Error::data(format!("malformed layer record '{record}'")))?;
            let adapter = match kind {
                AdapterKind::KronaWed => Adapter::KronaWed(KronaWedAdapter {
                    a: archive.array(&format!("{layer}.kron.A"))?.clone(),
                    b: archive.array(&format!("{layer}.kron.B"))?.clone(),
                    m: archive.array(&format!("{layer}.m"))?.clone(),
                }),
                AdapterKind::Krona => Adapter::Krona(KronaAdapter {
                    a: archive.array(&format!("{layer}.kron.A"))?.clone(),
                    b: archive.array(&format!("{layer}.kron.B"))?.clone(),
                }),
                AdapterKind::Lora => Adapter::Lora(LoraAdapter {
                    a: archive.array(&format!("{layer}.lora.A"))?.clone(),
                    b: archive.array(&format!("{layer}.lora.B"))?.clone(),
                }),
            };
            adapters.insert(layer.to_string(), adapter);
        }
        Ok(AdapterCheckpoint {
            kind,
            factor,
            adapters,
            concepts: pull_concepts(archive)?,
            image_adapter: ImageAdapter {
                w: archive.array("image_adapter.w")?.clone(),
                b: archive.array("image_adapter.b")?.clone(),
            },
        })
    }

    /// Saves to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads from a file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Attaches the adapters to a denoiser and restores the concepts.
    pub fn apply(
        &self,
        den: &mut Denoiser<S>,
        registry: &mut ConceptRegistry<S>,
    ) -> Result<()> {
        for (layer, adapter) in &self.adapters {
            den.attach_adapter(layer, adapter.clone())?;
        }
        restore_concepts(registry, &self.concepts)
    }
}

// ---------------------------------------------------------------------------
// fused checkpoints
// ---------------------------------------------------------------------------

/// Output of gradient fusion: dense per-layer updates plus every merged
/// concept's token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedCheckpoint<S: Scalar> {
    /// Per-layer dense weight updates keyed by layer id.
    pub deltas: BTreeMap<String, Mat<S>>,
    /// Concepts merged into this model, in fusion order.
    pub concepts: Vec<TrainedConcept<S>>,
}

impl<S: Scalar> FusedCheckpoint<S> {
    /// Packs the checkpoint into an archive.
    pub fn to_archive(&self) -> Archive<S> {
        let mut archive = Archive::default();
        archive.meta.push(("content".to_string(), "fused".to_string()));
        for (layer, delta) in &self.deltas {
            archive.arrays.insert(format!("{layer}.delta"), delta.clone());
            archive.meta.push((
                "layer".to_string(),
                format!("{layer} {} {}", delta.rows(), delta.cols()),
            ));
        }
        push_concepts(&mut archive, &self.concepts);
        archive
    }

    /// Unpacks a checkpoint from an archive.
    pub fn from_archive(archive: &Archive<S>) -> Result<Self> {
        match archive.meta("content") {
            Some("fused") => {}
            other => {
                return Err(Error::data(format!(
                    "expected a fused checkpoint, found content '{}'",
                    other.unwrap_or("<missing>")
                )))
            }
        }
        let mut deltas = BTreeMap::new();
        for record in archive.meta_all("layer") {
            let layer = record
                .split_whitespace()
                .next()
                .ok_or_else(|| Error::data(format!("malformed layer record '{record}'")))?;
            deltas.insert(layer.to_string(), archive.array(&format!("{layer}.delta"))?.clone());
        }
        Ok(FusedCheckpoint { deltas, concepts: pull_concepts(archive)? })
    }

    /// Saves to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads from a file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Installs the dense updates on a denoiser and restores the concepts.
    pub fn apply(
        &self,
        den: &mut Denoiser<S>,
        registry: &mut ConceptRegistry<S>,
    ) -> Result<()> {
        for (layer, delta) in &self.deltas {
            den.set_delta(layer, delta.clone())?;
        }
        restore_concepts(registry, &self.concepts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter;
    use crate::testbed::{layer_ids, MODEL_DIM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Mat<f64>;

    fn sample_concept(name: &str, seed: u64) -> TrainedConcept<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainedConcept {
            name: name.to_string(),
            class_word: "circle".to_string(),
            v_rand: M::randn(1, MODEL_DIM, 0.0, 1.0, &mut rng),
            v_class: M::randn(1, MODEL_DIM, 0.0, 1.0, &mut rng),
        }
    }

    fn sample_adapter_checkpoint(kind: AdapterKind, factor: usize) -> AdapterCheckpoint<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adapters = layer_ids()
            .into_iter()
            .enumerate()
            .map(|(i, layer)| {
                let w0 = M::randn(MODEL_DIM, MODEL_DIM, 0.0, 1.0, &mut rng);
                (layer, init_adapter(kind, &w0, factor, 40 + i as u64).unwrap())
            })
            .collect();
        let mut image_adapter = ImageAdapter::new(MODEL_DIM);
        image_adapter.w = M::randn(
            crate::objectives::IMAGE_FEATS,
            MODEL_DIM,
            0.0,
            1.0,
            &mut rng,
        );
        AdapterCheckpoint {
            kind,
            factor,
            adapters,
            concepts: vec![sample_concept("ciroA", 5)],
            image_adapter,
        }
    }

    #[test]
    fn archive_bytes_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut archive = Archive::<f64>::default();
        archive.meta.push(("content".to_string(), "adapter".to_string()));
        archive.meta.push(("layer".to_string(), "enc.self.q 32 32".to_string()));
        archive.arrays.insert("x".to_string(), M::randn(7, 3, 0.0, 1.0, &mut rng));
        archive.arrays.insert("empty".to_string(), M::zeros(0, 4));
        let back = Archive::from_bytes(&archive.to_bytes()).unwrap();
        assert_eq!(back, archive);
        assert_eq!(back.to_bytes(), archive.to_bytes());
    }

    #[test]
    fn archive_rejects_malformed_input() {
        let archive = Archive::<f64> {
            meta: vec![],
            arrays: [("x".to_string(), M::zeros(2, 2))].into_iter().collect(),
        };
        let bytes = archive.to_bytes();
        assert!(Archive::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Archive::<f64>::from_bytes(b"no header end").is_err());
        assert!(Archive::<f64>::from_bytes(b"format something-else/9\nEND-HEADER\n").is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Archive::<f64>::from_bytes(&trailing).is_err());
    }

    #[test]
    fn adapter_checkpoints_round_trip_for_every_kind() {
        for (kind, factor) in
            [(AdapterKind::KronaWed, 16), (AdapterKind::Krona, 8), (AdapterKind::Lora, 4)]
        {
            let ckpt = sample_adapter_checkpoint(kind, factor);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("adapter.ckpt");
            ckpt.save(&path).unwrap();
            let back = AdapterCheckpoint::load(&path).unwrap();
            assert_eq!(back, ckpt, "{kind} checkpoint round trip");
            let twice = dir.path().join("again.ckpt");
            back.save(&twice).unwrap();
            assert_eq!(std::fs::read(&twice).unwrap(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn fused_checkpoint_round_trips_and_applies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let deltas: BTreeMap<String, M> = layer_ids()
            .into_iter()
            .map(|layer| (layer, M::randn(MODEL_DIM, MODEL_DIM, 0.0, 0.01, &mut rng)))
            .collect();
        let ckpt = FusedCheckpoint {
            deltas,
            concepts: vec![sample_concept("ciroA", 5), sample_concept("quadB", 6)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fused.ckpt");
        ckpt.save(&path).unwrap();
        let back = FusedCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);

        let mut den = Denoiser::<f64>::new(1);
        let mut registry =
            ConceptRegistry::new(crate::concepts::Vocabulary::builtin(MODEL_DIM, 1));
        back.apply(&mut den, &mut registry).unwrap();
        assert_eq!(den.deltas().len(), layer_ids().len());
        assert_eq!(registry.concepts().len(), 2);
        assert!(registry.tokenize("a photo of <ciroA> beside <quadB>").is_ok());
    }

    #[test]
    fn content_kinds_do_not_cross_load() {
        let adapter = sample_adapter_checkpoint(AdapterKind::Lora, 2);
        let err = FusedCheckpoint::from_archive(&adapter.to_archive()).unwrap_err();
        assert!(err.to_string().contains("fused"), "{err}");
        let fused = FusedCheckpoint::<f64> { deltas: BTreeMap::new(), concepts: vec![] };
        assert!(AdapterCheckpoint::from_archive(&fused.to_archive()).is_err());
    }

    #[test]
    fn applying_an_adapter_checkpoint_matches_its_source_model() {
        let ckpt = sample_adapter_checkpoint(AdapterKind::KronaWed, 16);
        let mut den = Denoiser::<f64>::new(1);
        let mut registry =
            ConceptRegistry::new(crate::concepts::Vocabulary::builtin(MODEL_DIM, 1));
        ckpt.apply(&mut den, &mut registry).unwrap();
        assert_eq!(den.adapters().len(), ckpt.adapters.len());
        let pair = registry.get("ciroA").unwrap();
        assert_eq!(pair.v_rand, ckpt.concepts[0].v_rand);
        assert_eq!(pair.class_word, "circle");
    }
}
