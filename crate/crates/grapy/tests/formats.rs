//! Byte-level round trips of images, label maps, checkpoints, manifests and
//! taxonomy configs.

mod common;

use grapy::checkpoint::{Checkpoint, CheckpointError};
use grapy::data::{self, DatasetSpec, Manifest, ManifestEntry, Split};
use grapy::labels::LabelMap;
use grapy::netpbm::{self, NetpbmError};
use grapy::params::ParamStore;
use grapy::synth::SceneSpec;
use grapy::taxonomy::{builtin_taxonomies, Taxonomy};
use grapy::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ppm_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (13, 9);
    let rgb: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
    let bytes = netpbm::encode_ppm_rgb(h, w, &rgb);
    let image = netpbm::decode_ppm(&bytes).unwrap();
    assert_eq!(image.shape(), &[h, w, 3]);
    assert_eq!(netpbm::encode_ppm(&image), bytes);
}

#[test]
fn pgm_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = common::random_labels(&mut rng, 32, 32, 12);
    let bytes = netpbm::encode_pgm(&labels);
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    let (h, w, values) = netpbm::decode_pgm(&bytes).unwrap();
    let back = LabelMap::new(h, w, 12, values.into_iter().map(usize::from).collect()).unwrap();
    assert_eq!(back, labels);
    assert_eq!(netpbm::encode_pgm(&back), bytes);
}

#[test]
fn truncated_pixel_data_is_reported() {
    let bytes = netpbm::encode_pgm(&LabelMap::filled(4, 4, 3, 1));
    let err = netpbm::decode_pgm(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(err, NetpbmError::Data { expected: 16, got: 15, .. }));
    let err = netpbm::decode_ppm(&bytes).unwrap_err();
    assert!(matches!(err, NetpbmError::Magic { offset: 0, .. }), "{err}");
}

fn random_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in [("a.kernel", vec![3, 3, 2, 4]), ("a.bias", vec![1, 1, 4]), ("b", vec![5])] {
        store.insert(name, common::random_tensor(&mut rng, &shape, -1e3, 1e3)).unwrap();
    }
    store.insert("c", Tensor::new(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e-300]).unwrap()).unwrap();
    store
}

#[test]
fn checkpoint_bytes_round_trip() {
    let ckpt = Checkpoint::new("kind\tsingle\ntaxonomy\tA\n", random_store(3));
    let bytes = ckpt.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.manifest, ckpt.manifest);
    for (name, t) in ckpt.params.iter() {
        let u = back.params.get(name).unwrap();
        assert_eq!(u.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(u), bits(t), "{name}");
    }
    assert_eq!(back.encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().encode(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = Checkpoint::new("m", random_store(4)).encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Version(_))));
    for cut in [3, 10, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn manifest_text_round_trip() {
    let m = Manifest {
        taxonomy: "B".into(),
        entries: (0..4)
            .map(|i| {
                let split = if i < 3 { "train" } else { "test" };
                ManifestEntry {
                    index: i,
                    image: format!("{split}/{i:05}.ppm").into(),
                    labels: format!("{split}/{i:05}.pgm").into(),
                }
            })
            .collect(),
    };
    let text = m.to_text();
    let back = Manifest::parse(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_text(), text);
    assert_eq!(back.entries[3].split(), Some(Split::Test));
    assert!(Manifest::parse("0\ta\tb\n").is_err());
}

#[test]
fn taxonomy_config_round_trip() {
    for tax in builtin_taxonomies() {
        let text = tax.to_config();
        let back = Taxonomy::parse_config(tax.name(), &text).unwrap();
        assert_eq!(back.to_config(), text);
        assert_eq!(back.fine_labels(), tax.fine_labels());
    }
}

#[test]
fn written_dataset_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        taxonomy: Taxonomy::builtin("C").unwrap(),
        train: 3,
        test: 2,
    };
    let scene = SceneSpec::default();
    let manifest = data::write_dataset(dir.path(), &spec, &scene).unwrap();
    let (train, test) = data::generate_dataset(&spec, &scene).unwrap();
    for (split, expected) in [(Split::Train, &train), (Split::Test, &test)] {
        let loaded = data::load_split_auto(&manifest, split).unwrap();
        assert_eq!(loaded.len(), expected.len());
        for (a, b) in loaded.samples.iter().zip(&expected.samples) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(netpbm::encode_ppm(&a.image), netpbm::encode_ppm(&b.image));
        }
    }
}
