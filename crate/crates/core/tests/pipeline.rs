use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tse_core::data::{load_manifest, load_record, CorpusConfig, SyntheticCorpus};
use tse_core::embeddings::EmbeddingStore;
use tse_core::nn::{NetworkConfig, ScoreNetworkCheckpoint};
use tse_core::sampler::{extract_waveform, SamplerConfig};
use tse_core::sde::SdeParams;
use tse_core::stft::{Stft, StftConfig};
use tse_core::training::{train, Dataset, TrainConfig};

fn small_corpus() -> SyntheticCorpus {
    SyntheticCorpus::generate(&CorpusConfig {
        train_speakers_per_family: 1,
        valid_speakers_per_family: 1,
        test_speakers_per_family: 1,
        train_mixtures: 4,
        valid_mixtures: 2,
        test_mixtures: 2,
        utterance_secs: 0.4,
        enrollment_secs: 1.0,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_network() -> NetworkConfig {
    NetworkConfig {
        depth: 1,
        blocks_per_level: 1,
        base_channels: 4,
        channel_multipliers: vec![1],
        time_embed_dim: 16,
        embed_hidden_dim: 8,
        ..NetworkConfig::default()
    }
}

fn stft_config() -> StftConfig {
    StftConfig {
        frames: 16,
        ..StftConfig::default()
    }
}

fn trained(corpus: &SyntheticCorpus) -> ScoreNetworkCheckpoint {
    let cfg = TrainConfig {
        max_steps: 3,
        warmup_steps: 1,
        batch_size: 2,
        validation_samples: 1,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let sampler = SamplerConfig {
        n_steps: 3,
        ..SamplerConfig::default()
    };
    let data = Dataset {
        train: corpus.train.clone(),
        valid: corpus.valid.clone(),
    };
    train(&cfg, &small_network(), &data, &corpus.embeddings, &SdeParams::default(), &stft_config(), &sampler, &mut ()).unwrap()
}

#[test]
fn corpus_files_reload_as_the_same_records() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let entries = load_manifest(&dir.path().join("test.jsonl")).unwrap();
    assert_eq!(entries.len(), corpus.test.len());
    for (entry, rec) in entries.iter().zip(&corpus.test) {
        let loaded = load_record(entry, 8000).unwrap();
        assert_eq!(loaded.id, rec.id);
        assert_eq!(loaded.speaker_ids, rec.speaker_ids);
        // 16-bit storage.
        for (a, b) in loaded.mixture.samples.iter().zip(&rec.mixture.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
    let store = EmbeddingStore::load(&dir.path().join("embeddings.jsonl")).unwrap();
    assert_eq!(store, corpus.embeddings);
}

#[test]
fn train_save_load_and_extract() {
    let corpus = small_corpus();
    let ckpt = trained(&corpus);
    assert_eq!(ckpt, trained(&corpus));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = ScoreNetworkCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);

    let net = loaded.build().unwrap();
    let stft = Stft::new(stft_config()).unwrap();
    let sampler = SamplerConfig {
        n_steps: 4,
        ..SamplerConfig::default()
    };
    let rec = &corpus.test[0];
    let e_a = corpus.embeddings.get(&rec.speaker_ids[0]).unwrap();
    let e_b = corpus.embeddings.get(&rec.speaker_ids[1]).unwrap();
    let run = |e: &[f64]| {
        extract_waveform(&net, &loaded.params, &stft, &rec.mixture, e, &sampler, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    };
    let a = run(e_a);
    assert_eq!(a.len(), rec.mixture.len());
    assert!(a.samples.iter().all(|v| v.is_finite()));
    assert_eq!(a, run(e_a));
    assert_ne!(a, run(e_b));
}
