use std::ffi::{CStr, CString};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semcap::attributes::AttributeSet;
use semcap::checkpoint::Checkpoint;
use semcap::config::RunConfig;
use semcap::decode::{greedy_decode, Captioner};
use semcap::model::ModelParams;
use semcap::vocab::build_vocabulary;
use semcap_ffi::*;

fn checkpoint() -> Checkpoint {
    let mut config = RunConfig::default();
    config.model.embed_dim = 6;
    config.model.input_dim = 8;
    config.model.hidden_dim = 8;
    config.model.feature_dim = Some(4);
    let vocab = build_vocabulary(&[vec!["a", "red", "cat", "on", "the", "mat"]], 1).unwrap();
    let model = config.model_config(vocab.len(), 4).unwrap();
    let params = ModelParams::init(&model, &vocab, &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
    Checkpoint { config, vocab, params }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(semcap_last_error()) }.to_str().unwrap().to_owned()
}

#[test]
fn caption_matches_library_decode() {
    let ck = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    ck.save(&path).unwrap();
    let features = [0.5, -0.25, 1.0, 0.0];

    let model_config = ck.model_config().unwrap();
    let ids: Vec<_> = ["cat", "red"].iter().map(|w| ck.vocab.get(w).unwrap()).collect();
    let attrs = AttributeSet::from_ids(&ids);
    let captioner = Captioner::new(&ck.params, &model_config, &features, &attrs).unwrap();
    let (expected, _) = greedy_decode(&captioner, attrs.ids(), 7).unwrap();
    let expected = ck.vocab.decode(&expected.tokens).join(" ");

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(semcap_model_load(cpath.as_ptr(), &mut model), SemcapStatus::Ok);
        assert_eq!(semcap_model_feature_dim(model), 4);
        assert_eq!(semcap_model_vocab_size(model), ck.vocab.len());
        let words = CString::new("cat red").unwrap();
        let mut out = ptr::null_mut();
        let status = semcap_caption_greedy(model, features.as_ptr(), 4, words.as_ptr(), 7, &mut out);
        assert_eq!(status, SemcapStatus::Ok, "{}", last_error());
        assert_eq!(CStr::from_ptr(out).to_str().unwrap(), expected);
        semcap_string_free(out);

        let mut out = ptr::null_mut();
        let status = semcap_caption_greedy(model, features.as_ptr(), 3, words.as_ptr(), 7, &mut out);
        assert_eq!(status, SemcapStatus::InvalidArgument);
        assert!(out.is_null());
        assert!(last_error().contains("feature"));

        let unknown = CString::new("zebra").unwrap();
        let status = semcap_caption_greedy(model, features.as_ptr(), 4, unknown.as_ptr(), 7, &mut out);
        assert_eq!(status, SemcapStatus::InvalidArgument);
        assert!(last_error().contains("zebra"));

        let status = semcap_caption_greedy(model, features.as_ptr(), 4, ptr::null(), 7, &mut out);
        assert_eq!(status, SemcapStatus::InvalidArgument);
        semcap_model_free(model);
    }
}

#[test]
fn load_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.ck").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(semcap_model_load(missing.as_ptr(), &mut model), SemcapStatus::Io);
        assert!(model.is_null());
        assert!(!last_error().is_empty());

        let junk = dir.path().join("junk.ck");
        std::fs::write(&junk, b"not a model").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(semcap_model_load(junk.as_ptr(), &mut model), SemcapStatus::Checkpoint);
        assert_eq!(semcap_model_load(ptr::null(), &mut model), SemcapStatus::NullPointer);
        assert_eq!(semcap_model_load(junk.as_ptr(), ptr::null_mut()), SemcapStatus::NullPointer);
        assert_eq!(semcap_model_feature_dim(ptr::null()), 0);
        semcap_model_free(ptr::null_mut());
        semcap_string_free(ptr::null_mut());
    }
}

#[test]
fn evaluate_scores_identical_tables() {
    let text = CString::new("1\ta cat on a mat\n2\ta dog runs in the park\n").unwrap();
    let mut m = SemcapMetrics::default();
    unsafe {
        assert_eq!(semcap_evaluate(text.as_ptr(), text.as_ptr(), &mut m), SemcapStatus::Ok);
        assert!((m.bleu4 - 1.0).abs() < 1e-12);
        assert!((m.rouge_l - 1.0).abs() < 1e-12);
        assert!(m.cider > 0.0);
        assert_eq!(last_error(), "");

        let refs = CString::new("1\ta cat on a mat\n").unwrap();
        assert_eq!(semcap_evaluate(text.as_ptr(), refs.as_ptr(), &mut m), SemcapStatus::MissingReference);
        assert!(last_error().contains('2'));
        let bad = [0xffu8, 0];
        assert_eq!(
            semcap_evaluate(bad.as_ptr().cast(), text.as_ptr(), &mut m),
            SemcapStatus::InvalidUtf8
        );
    }
}
