use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusionvitals::dataio::Tensor;
use fusionvitals::model::{forward, Modality, ModelConfig, ModelInput, ModelParams};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/forward_tiny.json")
}

fn random_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bits(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{:016x}", x.to_bits())).collect()
}

fn outputs() -> BTreeMap<String, Vec<String>> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let [h, w] = cfg.in_hw;
    let input = ModelInput {
        rgb: random_tensor(vec![3, cfg.window_len, h, w], &mut rng),
        ir: random_tensor(vec![1, cfg.window_len, h, w], &mut rng),
    };
    let mut out = BTreeMap::new();
    for m in [Modality::Rgb, Modality::Ir, Modality::Both] {
        let p = forward(&input, &params, m, false).unwrap().prediction;
        out.insert(format!("{m}.bvp"), bits(&p.bvp));
        out.insert(format!("{m}.rr"), bits(&p.rr));
        out.insert(format!("{m}.spo2"), bits(&[p.spo2]));
        out.insert(format!("{m}.gate"), bits(&p.gate));
    }
    out
}

#[test]
fn forward_matches_golden_file() {
    let got = outputs();
    let path = golden_path();
    if std::env::var_os("FUSIONVITALS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let text = std::fs::read_to_string(&path).expect("golden file; set FUSIONVITALS_BLESS=1 to create it");
    let want: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).unwrap();
    assert_eq!(got, want);
}
