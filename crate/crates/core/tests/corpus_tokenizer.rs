use std::collections::{BTreeMap, HashSet};

use dialogue_core::corpus::{
    gen_synthetic_corpus, load_corpus, make_instances, save_corpus, Corpus, Dialogue, InstanceConfig, Mode, Speaker,
    SyntheticSpec, Turn,
};
use dialogue_core::tokenizer::{
    build_vocab, decode, encode_dialogue, EncodeLimits, Vocab, BOS, EOS, SEP, SPECIAL_TOKENS,
};
use proptest::prelude::*;

#[test]
fn synthetic_corpus_round_trips_through_a_file() {
    let corpus = gen_synthetic_corpus(&SyntheticSpec::new(3, 2, 4, 8, 20), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&corpus, &path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back.len(), corpus.len());
    for (a, b) in corpus.dialogues().iter().zip(back.dialogues()) {
        assert_eq!((&a.id, &a.domain, &a.task), (&b.id, &b.domain, &b.task));
        assert_eq!(a.turns(), b.turns());
    }
    let path2 = dir.path().join("again.jsonl");
    save_corpus(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

fn word_set(d: &Dialogue) -> HashSet<&str> {
    d.turns().iter().flat_map(|t| t.text().split(' ')).collect()
}

fn jaccard(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

#[test]
fn same_task_dialogues_overlap_more_than_cross_domain() {
    for seed in [0, 1, 7] {
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(2, 2, 5, 8, 20), seed).unwrap();
        let ds = corpus.dialogues();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let s = jaccard(&word_set(&ds[i]), &word_set(&ds[j]));
                if ds[i].domain == ds[j].domain && ds[i].task == ds[j].task {
                    within.push(s);
                } else if ds[i].domain != ds[j].domain {
                    across.push(s);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) > mean(&across), "seed {seed}: {} vs {}", mean(&within), mean(&across));
    }
}

#[test]
fn vocab_matches_independent_frequency_count() {
    let corpus = gen_synthetic_corpus(&SyntheticSpec::new(2, 2, 10, 8, 30), 3).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for d in corpus.dialogues() {
        for t in d.turns() {
            for w in t.text().split(' ') {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by_key(|(w, c)| (std::cmp::Reverse(*c), w.clone()));
    for max_size in [6, 20, 50, 1000] {
        let vocab = build_vocab(&corpus, max_size).unwrap();
        let want: Vec<&str> = ranked.iter().take(max_size - 5).map(|(w, _)| w.as_str()).collect();
        let got: Vec<&str> = vocab.tokens()[5..].iter().map(String::as_str).collect();
        assert_eq!(got, want, "max_size {max_size}");
        assert!(vocab.len() <= max_size);
    }
}

#[test]
fn every_instance_respects_its_mode() {
    let corpus = gen_synthetic_corpus(&SyntheticSpec::new(2, 3, 6, 8, 20), 5).unwrap();
    for mode in [Mode::PureTask, Mode::CrossTask] {
        let set = make_instances(&corpus, &InstanceConfig::new(mode, 3, 9)).unwrap();
        assert!(!set.instances.is_empty());
        for inst in &set.instances {
            assert_eq!(inst.gold_response.speaker(), Speaker::User);
            assert_eq!(inst.target_context.last().unwrap().speaker(), Speaker::Wizard);
            assert_eq!(inst.support.len(), 3);
            for s in &inst.support {
                assert_ne!(s.id, inst.target_id);
                assert_eq!(s.domain, inst.domain);
                match mode {
                    Mode::PureTask => assert_eq!(s.task, inst.task),
                    Mode::CrossTask => assert_ne!(s.task, inst.task),
                }
            }
        }
        let again = make_instances(&corpus, &InstanceConfig::new(mode, 3, 9)).unwrap();
        assert_eq!(set.instances, again.instances);
    }
}

const WORDS: [&str; 8] = ["hi", "book", "a", "table", "for", "two", "please", "?"];

fn vocab() -> Vocab {
    let text: String = SPECIAL_TOKENS.iter().chain(&WORDS).map(|w| format!("{w}\n")).collect();
    Vocab::from_text(&text).unwrap()
}

fn utterance() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..7).prop_map(|w| w.join(" "))
}

fn dialogue_turns() -> impl Strategy<Value = (Vec<Turn>, Option<Turn>)> {
    (prop::collection::vec(utterance(), 1..9), prop::option::of(utterance())).prop_map(|(texts, resp)| {
        let turns: Vec<Turn> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn::new(if i % 2 == 0 { Speaker::Wizard } else { Speaker::User }, t).unwrap())
            .collect();
        let resp = resp.map(|r| Turn::user(&r).unwrap());
        (turns, resp)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decode_inverts_encode(text in utterance()) {
        let v = vocab();
        let ids: Vec<usize> = v.encode_words(&text);
        prop_assert_eq!(decode(&ids, &v).unwrap(), text);
    }

    #[test]
    fn stream_invariants((turns, resp) in dialogue_turns(), max_seq in 12usize..64, max_turns in 2usize..10) {
        let v = vocab();
        let limits = EncodeLimits { max_seq, max_turns };
        let Ok(seq) = encode_dialogue(&turns, &v, resp.as_ref(), limits) else {
            return Ok(());
        };
        let n = seq.len();
        prop_assert!(n <= max_seq);
        prop_assert_eq!(seq.speaker_ids.len(), n);
        prop_assert_eq!(seq.turn_ids.len(), n);
        prop_assert_eq!(seq.position_ids.len(), n);
        prop_assert_eq!(&seq.position_ids, &(0..n).collect::<Vec<_>>());
        prop_assert_eq!(seq.token_ids.iter().filter(|&&t| t == BOS).count(), 1);
        prop_assert_eq!(seq.token_ids[0], BOS);
        let eos = seq.token_ids.iter().filter(|&&t| t == EOS).count();
        prop_assert_eq!(eos, usize::from(resp.is_some()));
        prop_assert!(seq.speaker_ids.iter().all(|&s| s <= 1));
        prop_assert!(seq.turn_ids.iter().all(|&t| t < max_turns));
        prop_assert!(seq.turn_ids.windows(2).all(|w| w[0] <= w[1]));

        // the surviving window is a suffix; re-encoding it drops nothing
        if seq.kept_turns > 0 {
            let kept = &turns[turns.len() - seq.kept_turns..];
            let re = encode_dialogue(kept, &v, resp.as_ref(), limits).unwrap();
            prop_assert_eq!(&re, &seq);
        }

        // turn ids step by one after every SEP until clipping
        let mut expected = 0;
        for i in 1..n {
            prop_assert_eq!(seq.turn_ids[i], expected.min(max_turns - 1));
            if seq.token_ids[i] == SEP {
                expected += 1;
            }
        }
    }
}

#[test]
fn seven_turn_overflow_drops_oldest_turns() {
    let v = vocab();
    let turns: Vec<Turn> = (0..7)
        .map(|i| Turn::new(if i % 2 == 0 { Speaker::Wizard } else { Speaker::User }, "book a table for two").unwrap())
        .collect();
    let resp = Turn::user("please").unwrap();
    let limits = EncodeLimits { max_seq: 22, max_turns: 8 };
    let seq = encode_dialogue(&turns, &v, Some(&resp), limits).unwrap();
    // 1 + 6k + 2 <= 22 keeps k = 3 turns
    assert_eq!(seq.kept_turns, 3);
    let re = encode_dialogue(&turns[4..], &v, Some(&resp), limits).unwrap();
    assert_eq!(seq, re);
    assert_eq!(seq.turn_ids[1], 0);
}

#[test]
fn corpus_filter_keeps_index_consistent() {
    let corpus = gen_synthetic_corpus(&SyntheticSpec::new(2, 1, 3, 4, 10), 2).unwrap();
    let one: Corpus = corpus.filter(|d| d.domain == corpus.dialogues()[0].domain).unwrap();
    assert_eq!(one.len(), 3);
    for d in one.dialogues() {
        assert_eq!(one.get(&d.id), Some(d));
    }
}
