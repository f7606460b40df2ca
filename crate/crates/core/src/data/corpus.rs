use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::encoders::IdentityLabel;
use crate::error::{Error, Result};
use crate::mesh::{MeshTopology, MotionSequence, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One paired utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub audio: AudioClip,
    pub motion: MotionSequence,
    pub label: IdentityLabel,
    pub template: Template,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub motion: PathBuf,
    pub identity: usize,
    pub split: Split,
}

/// On-disk corpus index. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub topology: PathBuf,
    /// Neutral template per identity, indexed by identity.
    pub templates: Vec<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn identities(&self) -> usize {
        self.templates.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.identities();
        for e in &self.entries {
            if e.identity >= k {
                return Err(Error::Config(format!(
                    "manifest entry {} has identity {} but only {k} templates are listed",
                    e.motion.display(),
                    e.identity
                )));
            }
        }
        Ok(())
    }
}

/// A loaded corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub topology: MeshTopology,
    pub templates: Vec<Template>,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn identities(&self) -> usize {
        self.templates.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_vertices(path: &Path, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::VertexCount {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads every example referenced by the manifest at `path`, validating
/// vertex counts against the topology.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = CorpusManifest::load(path)?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let topology = MeshTopology::load(&resolve(base, &manifest.topology))?;
    let n = topology.vertex_count();
    let templates = manifest
        .templates
        .iter()
        .map(|p| {
            let p = resolve(base, p);
            let t = Template::load(&p)?;
            check_vertices(&p, n, t.vertex_count())?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = templates.len();
    let examples = manifest
        .entries
        .iter()
        .map(|e| {
            let motion_path = resolve(base, &e.motion);
            let motion = MotionSequence::load(&motion_path)?;
            check_vertices(&motion_path, n, motion.vertex_count())?;
            let audio = AudioClip::load_wav(&resolve(base, &e.audio))?;
            Ok(Example {
                audio,
                motion,
                label: IdentityLabel::new(e.identity, k)?,
                template: templates[e.identity].clone(),
                split: e.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        topology,
        templates,
        examples,
    })
}

/// Writes the corpus under `dir` and returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    for sub in ["audio", "motion", "templates"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    corpus.topology.save(&dir.join("topology.json"))?;
    let mut templates = Vec::with_capacity(corpus.templates.len());
    for (k, t) in corpus.templates.iter().enumerate() {
        let rel = PathBuf::from(format!("templates/identity_{k:03}.ptkm"));
        t.save(&dir.join(&rel))?;
        templates.push(rel);
    }
    let mut entries = Vec::with_capacity(corpus.examples.len());
    for (i, e) in corpus.examples.iter().enumerate() {
        let audio = PathBuf::from(format!("audio/{i:05}.wav"));
        let motion = PathBuf::from(format!("motion/{i:05}.ptkm"));
        e.audio.save_wav(&dir.join(&audio))?;
        e.motion.save(&dir.join(&motion))?;
        entries.push(ManifestEntry {
            audio,
            motion,
            identity: e.label.index(),
            split: e.split,
        });
    }
    let manifest = CorpusManifest {
        topology: PathBuf::from("topology.json"),
        templates,
        entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusSpec};

    fn small_spec(n: usize) -> CorpusSpec {
        CorpusSpec {
            styles: 2,
            sequences_per_style: n,
            seconds: 0.4,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_spec(2)).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(&manifest).unwrap();
        assert_eq!(back.examples, corpus.examples);
        assert_eq!(back.topology, corpus.topology);
    }

    #[test]
    fn empty_manifest_loads_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_spec(0)).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        assert!(load_corpus(&manifest).unwrap().is_empty());
    }

    #[test]
    fn vertex_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_spec(1)).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let bad = dir.path().join("motion/00001.ptkm");
        MotionSequence::new(3, 25.0, vec![0.0; 9]).unwrap().save(&bad).unwrap();
        match load_corpus(&manifest) {
            Err(Error::VertexCount { path, expected, found }) => {
                assert_eq!(path, bad);
                assert_eq!((expected, found), (64, 3));
            }
            other => panic!("expected a vertex-count error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_and_missing_files_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_spec(1)).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let motion = dir.path().join("motion/00000.ptkm");
        std::fs::write(&motion, b"PTKX garbage").unwrap();
        assert!(matches!(load_corpus(&manifest), Err(Error::CorruptHeader { .. })));
        std::fs::remove_file(&motion).unwrap();
        assert!(matches!(load_corpus(&manifest), Err(Error::MissingFile(p)) if p == motion));
    }

    #[test]
    fn manifest_round_trip() {
        let m = CorpusManifest {
            topology: "t.json".into(),
            templates: vec!["a.ptkm".into()],
            entries: vec![ManifestEntry {
                audio: "x.wav".into(),
                motion: "x.ptkm".into(),
                identity: 0,
                split: Split::Val,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(CorpusManifest::load(&p).unwrap(), m);
    }
}
