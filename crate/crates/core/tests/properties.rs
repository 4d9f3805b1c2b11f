use std::sync::OnceLock;

use munmt::corpus::{bucket_batches, Dataset, LangId};
use munmt::eval::{bleu, BleuMode};
use munmt::synthlang::{derive_sentence, gen_base_corpus, oracle_translate, zipf_cdf, BenchmarkConfig, CorpusSpec};
use munmt::tokenizer::{filter_by_length, normalize, Vocab, UNK};
use proptest::prelude::*;

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let lines: Vec<String> = [
            "abba cab dead bead",
            "ace bad cede fade",
            "dab cab abba ace",
            "faced decade bade",
            "e a b c d f",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Vocab::train(&[lines], 30, 1, None).unwrap()
    })
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-f]{1,7}", 1..12).prop_map(|w| w.join(" "))
}

fn spaced(s: &str) -> String {
    s.split(' ').collect::<Vec<_>>().join("  \t")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tokenizer_roundtrip(s in sentence()) {
        let v = vocab();
        let ids = v.encode(&spaced(&s)).unwrap();
        prop_assert!(!ids.contains(&UNK));
        prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&s));
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn length_filter_is_idempotent(
        items in prop::collection::vec(
            (prop::collection::vec(5u32..50, 0..20), prop::collection::vec(5u32..50, 0..20)),
            0..30,
        ),
        max in 0usize..20,
    ) {
        let kept = filter_by_length(items.clone(), max);
        prop_assert!(kept.iter().all(|(a, b)| a.len() <= max && b.len() <= max));
        let dropped = items.iter().filter(|(a, b)| a.len().max(b.len()) > max).count();
        prop_assert_eq!(kept.len() + dropped, items.len());
        prop_assert_eq!(filter_by_length(kept.clone(), max), kept);
    }

    #[test]
    fn buckets_partition_the_dataset(
        lens in prop::collection::vec(1usize..40, 1..200),
        max_tokens in 40usize..300,
        width in 1usize..10,
    ) {
        let items: Vec<Vec<u32>> = lens.iter().map(|&l| vec![7; l]).collect();
        let ds = Dataset::mono("m", LangId(0), items);
        let batches = bucket_batches(&ds, max_tokens, width).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(!b.is_empty());
            let longest = b.iter().map(|&i| lens[i]).max().unwrap();
            prop_assert!(b.len() * longest <= max_tokens);
            let bucket = (lens[b[0]] - 1) / width;
            prop_assert!(b.iter().all(|&i| (lens[i] - 1) / width == bucket));
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(
        pairs in prop::collection::vec((sentence(), sentence()), 1..15),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut munmt::rng::stream(seed, "perm"));
        let score = |p: &[(String, String)]| {
            let (h, r): (Vec<&str>, Vec<&str>) = p.iter().map(|(a, b)| (a.as_str(), b.as_str())).unzip();
            bleu(&h, &r, BleuMode::Pretokenized).unwrap().score
        };
        prop_assert_eq!(score(&pairs), score(&shuffled));
    }

    #[test]
    fn oracle_cycles_return_the_source(base in prop::collection::vec(0u32..200, 1..25)) {
        let langs = BenchmarkConfig::default().languages().unwrap();
        for from in &langs {
            let s = derive_sentence(&base, from).unwrap();
            for to in &langs {
                let there = oracle_translate(&s, from, to).unwrap();
                prop_assert_eq!(oracle_translate(&there, to, from).unwrap(), s.clone());
            }
        }
    }
}

#[test]
fn zipf_unigrams_pass_kolmogorov_smirnov() {
    let spec = CorpusSpec {
        vocab_types: 200,
        lines: 5000,
        successor_weight: 0.0,
        seed: 11,
        ..CorpusSpec::default()
    };
    let corpus = gen_base_corpus(&spec).unwrap();
    let mut counts = vec![0usize; spec.vocab_types];
    for w in corpus.iter().flatten() {
        counts[*w as usize] += 1;
    }
    let n: usize = counts.iter().sum();
    let cdf = zipf_cdf(spec.vocab_types, spec.zipf_exponent);
    let mut acc = 0usize;
    let mut d: f64 = 0.0;
    for (c, f) in counts.iter().zip(&cdf) {
        acc += c;
        d = d.max((acc as f64 / n as f64 - f).abs());
    }
    // 1% critical value of the one-sample statistic.
    let critical = 1.63 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} over {critical} with {n} draws");
}
