//! Every file format re-reads bit-exactly and rejects foreign versions.

use texnet::cponline::LoadProgram;
use texnet::dataset::{build_dataset, generate_rves, Dataset, DatasetConfig, ParamsFile};
use texnet::gnn::{infer_params, Checkpoint, GnnModel, CHECKPOINT_VERSION};
use texnet::mgraph::{decode_graph, encode_graph};
use texnet::oracle::{decode_labels, encode_labels, label_rve, FftConfig};
use texnet::rvegen::{decode_rve, encode_rve, rve_from_text, rve_to_text, sample_elastic_triples, TextureClass};

fn small_config() -> DatasetConfig {
    DatasetConfig {
        seed: 9,
        dims: [6, 6, 6],
        grains: 8,
        classes: vec![TextureClass::StrongTwo, TextureClass::WeakOne],
        rves_per_class: 1,
        triples_per_rve: 3,
        depths: vec![2, 3],
        fft: FftConfig {
            tol: 1e-6,
            max_iter: 500,
        },
        ..Default::default()
    }
}

fn bump_version(json: &str) -> String {
    json.replacen("\"version\":1", "\"version\":2", 1)
        .replacen("\"version\": 1", "\"version\": 2", 1)
}

#[test]
fn dataset_and_derived_files_round_trip() {
    let cfg = small_config();
    let rves = generate_rves(&cfg).unwrap();
    let ds = build_dataset(&cfg, &rves).unwrap();
    let json = ds.to_json().unwrap();
    let back = Dataset::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert!(Dataset::from_json(&bump_version(&json)).is_err());

    for (_, rve) in &rves {
        assert_eq!(&decode_rve(&encode_rve(rve).unwrap()).unwrap(), rve);
        assert_eq!(&rve_from_text(&rve_to_text(rve).unwrap()).unwrap(), rve);
    }
    for e in &ds.entries {
        for d in &e.per_depth {
            assert_eq!(decode_graph(&encode_graph(&d.graph).unwrap()).unwrap(), d.graph);
        }
    }

    let triples = sample_elastic_triples(2, &cfg.elastic, 4).unwrap();
    let labels = label_rve(&rves[0].1, &triples, cfg.fft).unwrap();
    assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);

    let model = GnnModel::new(3, 1).unwrap();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        seed: 1,
        model: model.clone(),
        best_epoch: 0,
        best_val: 0.5,
        history: vec![],
    };
    let text = ckpt.to_json().unwrap();
    assert_eq!(Checkpoint::from_json(&text).unwrap(), ckpt);
    assert!(Checkpoint::from_json(&bump_version(&text)).is_err());

    let d = ds.entries[0].depth(3).unwrap();
    let params = infer_params(&model, &d.graph, &d.orientations).unwrap();
    let pf = ParamsFile::new(9, params);
    let text = pf.to_json().unwrap();
    assert_eq!(ParamsFile::from_json(&text).unwrap(), pf);
    assert_eq!(ParamsFile::from_json(&text).unwrap().to_json().unwrap(), text);
    assert!(ParamsFile::from_json(&bump_version(&text)).is_err());
}

#[test]
fn binary_decoders_reject_damage() {
    let cfg = small_config();
    let rve = &generate_rves(&cfg).unwrap()[0].1;
    let bytes = encode_rve(rve).unwrap();
    for cut in [0, 3, 8, 20, bytes.len() - 1] {
        assert!(decode_rve(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(decode_rve(&wrong_version).is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(decode_rve(&trailing).is_err());
}

#[test]
fn load_programs_serialize() {
    for p in [
        LoadProgram::uniaxial_cyclic(1.3, 1e-3),
        LoadProgram::uniaxial(1.1, 1e-2),
        LoadProgram::simple_shear(0.3, 1e-3),
    ] {
        let json = serde_json::to_string(&p).unwrap();
        let back: LoadProgram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        back.validate().unwrap();
    }
}
