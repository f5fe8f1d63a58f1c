use mitree_core::RunConfig;
use serde_json::Value;

/// One line per config key, in document order.
const KEYS: &[(&str, &str)] = &[
    (
        "data.root",
        "dataset directory or manifest path; required unless --data is given",
    ),
    ("data.species", "number of species S per target vector"),
    (
        "data.modalities",
        "raster modalities: name, channels, height, width, gsd_m",
    ),
    ("model.dim", "token width D; multiple of 4 and of model.heads"),
    ("model.heads", "attention heads per layer"),
    ("model.layers", "transformer blocks"),
    ("model.mlp_ratio", "MLP hidden width as a multiple of D"),
    ("model.head_hidden", "hidden width of the prediction head"),
    (
        "model.satellite_tokenizer",
        "residual | conv (single 16x16 patch convolution)",
    ),
    ("model.residual_preset", "r18 (64,128,256,512) | tiny (8,16,32,64)"),
    ("model.pedologic_patch", "pedologic patch size (kernel = stride)"),
    ("model.use_ecoregion", "append the ecoregion token"),
    ("model.ecoregion_level", "ecoregion level 1..4 used for the token"),
    ("model.ecoregion_counts", "category counts for levels 1..4"),
    ("model.dropout", "dropout on attention and MLP outputs during training"),
    ("train.batch_size", "hotspots per batch; the last partial batch is kept"),
    ("train.lr", "initial Adam learning rate"),
    ("train.epochs", "maximum number of epochs"),
    ("train.seed", "seed for initialization, shuffling and dropout"),
    (
        "train.eval_every",
        "validate every N epochs (the last epoch is always validated)",
    ),
    (
        "train.early_stop",
        "stop once lr is at min_lr and patience runs out again",
    ),
    ("train.plateau.factor", "lr multiplier on plateau"),
    (
        "train.plateau.patience",
        "validations without improvement before reducing lr",
    ),
    (
        "train.plateau.threshold",
        "minimum validation-loss decrease counted as improvement",
    ),
    ("train.plateau.min_lr", "learning-rate floor"),
    ("synth.zero_floor", "synthetic rates below this become exactly 0"),
    ("synth.bio_weight", "std of the bioclimate logit term"),
    ("synth.eco_weight", "std of the ecoregion logit term"),
    ("synth.sat_weight", "std of the satellite logit term"),
    ("synth.bias_mean", "mean species intercept"),
    ("synth.bias_std", "std of species intercepts"),
    ("synth.eco_spread", "spread of per-ecoregion raster and climate means"),
    ("synth.bio_noise", "per-hotspot bioclimate noise"),
    ("synth.raster_shift", "per-hotspot raster channel shift"),
    ("synth.pixel_noise", "per-pixel raster noise"),
    (
        "synth.sat_feature",
        "mean | texture: satellite statistic driving the oracle",
    ),
];

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |v, k| v.get(k))
}

/// Config key reference with defaults taken from `RunConfig::default()`.
pub fn config_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut out = String::from("Config keys (JSON file via --config; unknown keys are rejected):\n");
    for (key, doc) in KEYS {
        let default = match lookup(&defaults, key) {
            Some(Value::Null) | None => "(none)".to_string(),
            Some(Value::Array(a)) if a.iter().any(Value::is_object) => "3 canonical modalities".to_string(),
            Some(v) => v.to_string(),
        };
        out.push_str(&format!("  {:<28} default {:<10} {}\n", key, default, doc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if prefix != "data.modalities" => {
                for (k, x) in m {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{}.{}", prefix, k)
                    };
                    leaves(x, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn every_config_key_is_documented() {
        let mut keys = Vec::new();
        leaves(&serde_json::to_value(RunConfig::default()).unwrap(), "", &mut keys);
        let documented: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        for k in &keys {
            assert!(documented.contains(&k.as_str()), "undocumented key {}", k);
        }
        assert_eq!(keys.len(), KEYS.len());
    }
}
