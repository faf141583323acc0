use std::collections::BTreeMap;
use std::path::Path;

use s5_core::data;
use s5_core::io::Manifest;
use s5_core::synth::{self, CorpusConfig, LABELED_MANIFEST, OOD_MANIFEST, UNLABELED_MANIFEST};

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small(labeled: usize, val: usize, clean: usize, ood: usize) -> CorpusConfig {
    let mut c = CorpusConfig {
        labeled,
        val,
        unlabeled_clean: clean,
        unlabeled_ood: ood,
        styles: 2,
        ..CorpusConfig::default()
    };
    c.scene.image_size = 16;
    c
}

fn write(config: &CorpusConfig, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth::gen_corpus(config, seed).unwrap();
    synth::write_corpus(&corpus, config, dir.path()).unwrap();
    dir
}

#[test]
fn labeled_only_counts() {
    let dir = write(&small(10, 0, 0, 0), 1);
    let lines = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap().lines().count();
    assert_eq!(lines(LABELED_MANIFEST), 10);
    assert_eq!(lines(UNLABELED_MANIFEST), 0);
    assert_eq!(lines(OOD_MANIFEST), 0);
}

#[test]
fn every_manifest_line_resolves() {
    let dir = write(&small(4, 2, 6, 2), 2);
    for name in [LABELED_MANIFEST, UNLABELED_MANIFEST, OOD_MANIFEST] {
        let m = Manifest::read(&dir.path().join(name)).unwrap();
        for r in &m.records {
            assert!(m.resolve(&r.image).is_file(), "{name}: {}", r.image);
            if let Some(mask) = &r.mask {
                assert!(m.resolve(mask).is_file(), "{name}: {mask}");
            }
        }
        let samples = data::load_samples(&m).unwrap();
        assert_eq!(samples.len(), m.len());
    }
    let m = Manifest::read(&dir.path().join(LABELED_MANIFEST)).unwrap();
    assert_eq!(m.records.iter().filter(|r| r.split == "val").count(), 2);
    assert!(m.records.iter().all(|r| r.mask.is_some()));
    assert_eq!(Manifest::read(&dir.path().join(OOD_MANIFEST)).unwrap().len(), 2);
}

#[test]
fn same_seed_is_byte_identical_and_seeds_differ() {
    let cfg = small(3, 1, 4, 2);
    let a = tree(write(&cfg, 7).path());
    let b = tree(write(&cfg, 7).path());
    assert_eq!(a, b);
    let c = tree(write(&cfg, 8).path());
    assert_eq!(a.keys().collect::<Vec<_>>(), c.keys().collect::<Vec<_>>());
    assert_ne!(a, c);
}

#[test]
fn worker_count_does_not_change_the_corpus() {
    let cfg = small(3, 1, 5, 2);
    let run = |w| {
        data::with_workers(w, || tree(write(&cfg, 3).path())).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let cfg = small(1, 0, 0, 0);
    let corpus = synth::gen_corpus(&cfg, 1).unwrap();
    let err = synth::write_corpus(&corpus, &cfg, Path::new("/nonexistent/s5/out")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
