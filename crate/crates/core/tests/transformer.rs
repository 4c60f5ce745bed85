//! Randomly initialized BERT-family encoders loaded from a model cache.

use candle_core::{DType, Device};
use tagforge_core::checkpoint::{load_checkpoint, save_checkpoint};
use tagforge_core::encoder::{
    load_backbone, wordpiece_tokenizer_json, write_random_transformer, BackboneAssets, Registry, TransformerConfig,
    TransformerFamily,
};
use tagforge_core::model::{Component, ModelConfig, TagModel};
use tagforge_core::train::{batch_loss, gradients, prepare_examples};
use tagforge_core::vocab::{build_vocab, count_tags};

const WORDS: &[&str] = &[
    "how", "to", "sort", "a", "list", "in", "python", "print", "(", ")", "##s", "x", "=", "1",
];

fn tiny(family: TransformerFamily) -> TransformerConfig {
    TransformerConfig {
        family,
        vocab_size: 5 + WORDS.len(),
        hidden_size: 8,
        num_hidden_layers: 2,
        num_attention_heads: 2,
        intermediate_size: 16,
        max_position_embeddings: 514,
        type_vocab_size: 1,
        layer_norm_eps: 1e-12,
        pad_token_id: 0,
        hidden_act: "gelu".into(),
        embedding_size: (family == TransformerFamily::Albert).then_some(4),
    }
}

fn registry(dir: &std::path::Path) -> Registry {
    let mut reg = Registry::builtin(dir);
    reg.merge_toml(
        "[backbones.tiny-bert]\nfamily = \"bert\"\nhidden_size = 8\n\
         [backbones.tiny-roberta]\nfamily = \"roberta\"\nhidden_size = 8\n\
         [backbones.tiny-albert]\nfamily = \"albert\"\nhidden_size = 8\n",
        dir,
    )
    .unwrap();
    reg
}

fn setup() -> (tempfile::TempDir, Registry) {
    let dir = tempfile::tempdir().unwrap();
    let json = wordpiece_tokenizer_json(WORDS);
    for (id, fam) in [
        ("tiny-bert", TransformerFamily::Bert),
        ("tiny-roberta", TransformerFamily::Roberta),
        ("tiny-albert", TransformerFamily::Albert),
    ] {
        write_random_transformer(&dir.path().join(id), &tiny(fam), &json, 7).unwrap();
    }
    let reg = registry(dir.path());
    (dir, reg)
}

#[test]
fn every_family_encodes_and_pads_consistently() {
    let (_dir, reg) = setup();
    for id in ["tiny-bert", "tiny-roberta", "tiny-albert"] {
        let bb = load_backbone(id, &reg).unwrap();
        assert_eq!(bb.hidden_size(), 8);
        let short = bb.tokenize_component("print(x)").unwrap();
        assert_eq!(short.ids.first(), Some(&2));
        assert_eq!(short.ids.last(), Some(&3));
        let long = bb.tokenize_component("how to sort a list in python").unwrap();
        let batched = bb.encode_batch(&[&short, &long]).unwrap().to_vec2::<f32>().unwrap();
        let alone = bb.encode_component("print(x)").unwrap();
        for (a, b) in batched[0].iter().zip(&alone.values) {
            assert!((a - b).abs() < 1e-5, "{id}: {a} vs {b}");
        }
        let again = bb.encode_component("print(x)").unwrap();
        assert_eq!(alone, again);

        let huge = vec!["sort"; 700].join(" ");
        let seq = bb.tokenize_component(&huge).unwrap();
        assert_eq!(seq.len(), 512);
        assert!(bb.encode_component(&huge).unwrap().values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn gradients_reach_encoder_weights() {
    let (_dir, reg) = setup();
    let spec = reg.resolve("tiny-bert").unwrap();
    let assets = BackboneAssets::resolve(&spec).unwrap();
    let posts = vec![tagforge_core::corpus::Post {
        id: 1,
        created_at: chrono::Utc::now(),
        title: "sort a list".into(),
        description: "how to sort in python".into(),
        code: "print(x)".into(),
        tags: vec!["python".into()],
    }];
    let vocab = build_vocab(&count_tags(&posts), 1).unwrap();
    let cfg = ModelConfig::new(Component::ALL.to_vec(), "tiny-bert", vocab.len(), 8);
    let model = TagModel::initialize(cfg, &assets, 0, DType::F64, &Device::Cpu).unwrap();
    let examples = prepare_examples(&model, &posts, &vocab).unwrap();
    let loss = batch_loss(&model, &examples.iter().collect::<Vec<_>>()).unwrap();
    let grads = gradients(model.store(), &loss).unwrap();
    for name in [
        "head.out.bias",
        "encoder.title.embeddings.word_embeddings.weight",
        "encoder.code.encoder.layer.1.output.dense.weight",
    ] {
        assert!(grads.contains_key(name), "no gradient for {name}");
    }
}

#[test]
fn pretrained_checkpoint_keeps_tokenizer() {
    let (dir, reg) = setup();
    let assets = BackboneAssets::resolve(&reg.resolve("tiny-roberta").unwrap()).unwrap();
    let posts = vec![tagforge_core::corpus::Post {
        id: 1,
        created_at: chrono::Utc::now(),
        title: "sort".into(),
        description: String::new(),
        code: "x = 1".into(),
        tags: vec!["a".into(), "b".into()],
    }];
    let vocab = build_vocab(&count_tags(&posts), 1).unwrap();
    let cfg = ModelConfig::new(vec![Component::Title, Component::Code], "tiny-roberta", 2, 8);
    let model = TagModel::initialize(cfg, &assets, 0, DType::F32, &Device::Cpu).unwrap();
    let out = dir.path().join("ckpt");
    save_checkpoint(&model, &vocab, &out, None).unwrap();
    let loaded = load_checkpoint(&out, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(
        model.forward(&posts[0]).unwrap(),
        loaded.model.forward(&posts[0]).unwrap()
    );
}

#[test]
fn missing_files_name_the_backbone() {
    let (dir, reg) = setup();
    std::fs::remove_file(dir.path().join("tiny-albert/model.safetensors")).unwrap();
    let err = load_backbone("tiny-albert", &reg).unwrap_err().to_string();
    assert!(err.contains("tiny-albert"), "{err}");
}
