//! Composition schemes and their flat `KEY=value,...` form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(Error::InvalidScheme(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        s
                    ))),
                }
            }
        }
    };
}

named_enum!(EncodingScheme {
    SentenceLevelSegmentation => "sentence_level_segmentation",
    SegmentEachExample => "segment_each_example",
    MergeAllSegments => "merge_all_segments",
    ConcatEachExample => "concat_each_example",
    ConcatAllExamples => "concat_all_examples",
    CrossEncoding => "cross_encoding" | "cross-encoding",
});

named_enum!(Norm {
    None => "None" | "none",
    L2 => "L2" | "l2",
    VarNorm => "varNorm" | "var_norm",
    ZNorm => "zNorm" | "z_norm",
});

named_enum!(SegmentAgg {
    Mean => "mean",
    None => "None" | "none",
});

named_enum!(ExampleAgg {
    Mean => "mean",
    None => "None" | "none",
    SoftCluster => "soft_cluster",
});

named_enum!(Similarity {
    Dot => "dot" | "dot-product" | "dot_product",
    Cosine => "cosine" | "cosine-similarity" | "cosine_similarity",
    None => "None" | "none",
});

/// Which layer's hidden states stand in for tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSelector {
    /// Token embedding rows.
    E,
    /// Hidden state entering layer `l`; the layer count means the stack
    /// output after the final norm.
    Index(usize),
    /// `-l`: `l`-th from the top, `-1` being the stack output.
    NegIndex(usize),
    /// `floor(n_layers / 2)`.
    Middle,
}

impl LayerSelector {
    /// Resolves to a layer index in `0..=n_layers`, or `None` for `E`.
    pub fn resolve(self, n_layers: usize) -> Result<Option<usize>> {
        let out = |m: String| Err(Error::LayerOutOfRange(m));
        match self {
            LayerSelector::E => Ok(None),
            LayerSelector::Index(l) if l <= n_layers => Ok(Some(l)),
            LayerSelector::Index(l) => out(format!("layer {l} of a {n_layers}-layer stack")),
            LayerSelector::NegIndex(l) if (1..=n_layers + 1).contains(&l) => Ok(Some(n_layers + 1 - l)),
            LayerSelector::NegIndex(l) => out(format!("layer -{l} of a {n_layers}-layer stack")),
            LayerSelector::Middle => Ok(Some(n_layers / 2)),
        }
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::E => f.write_str("E"),
            LayerSelector::Index(l) => write!(f, "{l}"),
            LayerSelector::NegIndex(l) => write!(f, "-{l}"),
            LayerSelector::Middle => f.write_str("middle"),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidScheme(format!("bad layer selector {s:?}"));
        match s {
            "E" => Ok(LayerSelector::E),
            "middle" => Ok(LayerSelector::Middle),
            _ => match s.strip_prefix('-') {
                Some(n) => match n.parse::<usize>().map_err(|_| bad())? {
                    0 => Err(bad()),
                    l => Ok(LayerSelector::NegIndex(l)),
                },
                None => s.parse().map(LayerSelector::Index).map_err(|_| bad()),
            },
        }
    }
}

/// Point-wise filter applied before pooling words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordFilter {
    Identity,
    /// `act(x)`
    Act,
    /// `-act(-x)`
    NegAct,
    /// `x + act(x)`
    ActPlus,
    /// `x - act(-x)`
    NegActPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pool {
    Mean,
    /// Position `i` of `N` (1-indexed) weighted `i/N`, renormalized.
    W1Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordAgg {
    Pooled(WordFilter, Pool),
    Last,
}

impl WordAgg {
    pub const MEAN: WordAgg = WordAgg::Pooled(WordFilter::Identity, Pool::Mean);

    /// Every word aggregation the grammar can name.
    pub fn all() -> Vec<WordAgg> {
        let filters = [
            WordFilter::Identity,
            WordFilter::Act,
            WordFilter::NegAct,
            WordFilter::ActPlus,
            WordFilter::NegActPlus,
        ];
        let mut v: Vec<WordAgg> = [Pool::Mean, Pool::W1Mean]
            .into_iter()
            .flat_map(|p| filters.into_iter().map(move |f| WordAgg::Pooled(f, p)))
            .collect();
        v.push(WordAgg::Last);
        v
    }
}

impl fmt::Display for WordAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WordAgg::Last => f.write_str("last"),
            WordAgg::Pooled(filter, pool) => {
                let pool = match pool {
                    Pool::Mean => "mean",
                    Pool::W1Mean => "w1mean",
                };
                match filter {
                    WordFilter::Identity => f.write_str(pool),
                    WordFilter::Act => write!(f, "relu|{pool}"),
                    WordFilter::NegAct => write!(f, "-relu|{pool}"),
                    WordFilter::ActPlus => write!(f, "relu+|{pool}"),
                    WordFilter::NegActPlus => write!(f, "-relu+|{pool}"),
                }
            }
        }
    }
}

impl FromStr for WordAgg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidScheme(format!("unknown word aggregation {s:?}"));
        if s == "last" {
            return Ok(WordAgg::Last);
        }
        // accept both "relu+|w1mean" and "relu_plus_w1mean"
        let (filter, pool) = match s.split_once('|') {
            Some((f, p)) => (f, p),
            None => match s.rfind('_') {
                Some(i) if s.ends_with("mean") => (&s[..i], &s[i + 1..]),
                _ => ("", s),
            },
        };
        let pool = match pool {
            "mean" => Pool::Mean,
            "w1mean" => Pool::W1Mean,
            _ => return Err(bad()),
        };
        let filter = match filter {
            "" => WordFilter::Identity,
            "relu" => WordFilter::Act,
            "-relu" | "neg_relu" => WordFilter::NegAct,
            "relu+" | "relu_plus" => WordFilter::ActPlus,
            "-relu+" | "neg_relu_plus" => WordFilter::NegActPlus,
            _ => return Err(bad()),
        };
        Ok(WordAgg::Pooled(filter, pool))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Baseline,
    Test1,
    Test2,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Baseline => "baseline",
            TestKind::Test1 => "test1",
            TestKind::Test2 => "test2",
        })
    }
}

impl FromStr for TestKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(TestKind::Baseline),
            "test1" => Ok(TestKind::Test1),
            "test2" => Ok(TestKind::Test2),
            _ => Err(format!("unknown test {s:?}, expected baseline|test1|test2")),
        }
    }
}

/// One point of the composition grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct CompositionScheme {
    pub encoding_scheme: EncodingScheme,
    pub encoding_layer: LayerSelector,
    pub out_encoding_layer: LayerSelector,
    pub norm: Norm,
    pub word_agg: WordAgg,
    pub out_word_agg: WordAgg,
    pub segment_agg: SegmentAgg,
    pub example_agg: ExampleAgg,
    pub similarity: Similarity,
}

/// Field names in serialization order.
pub const FIELDS: [&str; 9] = [
    "encoding_scheme",
    "ENCODING_LAYER",
    "OUT_ENCODING_LAYER",
    "NORM",
    "WORD_AGG_SCHEME",
    "OUT_WORD_AGG_SCHEME",
    "SEGMENT_AGG_SCHEME",
    "EXAMPLE_AGG_SCHEME",
    "SIMILARITY_FUNC",
];

impl Default for CompositionScheme {
    /// Plain cross-encoding: top of stack, mean everywhere, no norm.
    fn default() -> Self {
        Self {
            encoding_scheme: EncodingScheme::CrossEncoding,
            encoding_layer: LayerSelector::NegIndex(1),
            out_encoding_layer: LayerSelector::NegIndex(1),
            norm: Norm::None,
            word_agg: WordAgg::MEAN,
            out_word_agg: WordAgg::MEAN,
            segment_agg: SegmentAgg::Mean,
            example_agg: ExampleAgg::Mean,
            similarity: Similarity::None,
        }
    }
}

impl CompositionScheme {
    pub fn values(&self) -> [String; 9] {
        [
            self.encoding_scheme.to_string(),
            self.encoding_layer.to_string(),
            self.out_encoding_layer.to_string(),
            self.norm.to_string(),
            self.word_agg.to_string(),
            self.out_word_agg.to_string(),
            self.segment_agg.to_string(),
            self.example_agg.to_string(),
            self.similarity.to_string(),
        ]
    }

    /// Sets one field from its serialized name and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoding_scheme" => self.encoding_scheme = value.parse()?,
            "ENCODING_LAYER" => self.encoding_layer = value.parse()?,
            "OUT_ENCODING_LAYER" => self.out_encoding_layer = value.parse()?,
            "NORM" => self.norm = value.parse()?,
            "WORD_AGG_SCHEME" => self.word_agg = value.parse()?,
            "OUT_WORD_AGG_SCHEME" => self.out_word_agg = value.parse()?,
            "SEGMENT_AGG_SCHEME" => self.segment_agg = value.parse()?,
            "EXAMPLE_AGG_SCHEME" => self.example_agg = value.parse()?,
            "SIMILARITY_FUNC" => self.similarity = value.parse()?,
            _ => return Err(Error::InvalidScheme(format!("unknown scheme field {key:?}"))),
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rules that hold regardless of the model.
    pub fn validate(&self, test: TestKind) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScheme(m.to_owned()));
        if self.example_agg == ExampleAgg::SoftCluster && test != TestKind::Test2 {
            return bad("soft_cluster only valid in Test 2");
        }
        match (test, self.similarity) {
            (TestKind::Test1, s) if s != Similarity::None => return bad("Test 1 takes SIMILARITY_FUNC=None"),
            (TestKind::Test2, Similarity::None) => return bad("Test 2 needs SIMILARITY_FUNC dot or cosine"),
            _ => {}
        }
        if self.encoding_scheme == EncodingScheme::CrossEncoding {
            let d = Self::default();
            if (
                self.encoding_layer,
                self.norm,
                self.word_agg,
                self.segment_agg,
                self.example_agg,
            ) != (d.encoding_layer, d.norm, d.word_agg, d.segment_agg, d.example_agg)
            {
                return bad("cross_encoding takes no encoding layer, norm or aggregation settings");
            }
        }
        Ok(())
    }

    /// Rules that depend on the model: `last` needs a causal encoding stack.
    pub fn validate_for(&self, test: TestKind, causal_context: bool) -> Result<()> {
        self.validate(test)?;
        let uses_last =
            self.word_agg == WordAgg::Last || (test == TestKind::Test2 && self.out_word_agg == WordAgg::Last);
        if uses_last && !causal_context && self.encoding_scheme != EncodingScheme::CrossEncoding {
            return Err(Error::InvalidScheme("last only valid for causal stacks".into()));
        }
        Ok(())
    }
}

impl fmt::Display for CompositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = FIELDS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for CompositionScheme {
    type Err = Error;
    /// Missing fields keep their defaults; repeated fields are an error.
    fn from_str(s: &str) -> Result<Self> {
        let mut scheme = Self::default();
        let mut seen = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidScheme(format!("expected key=value, got {part:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::InvalidScheme(format!("field {k} given twice")));
            }
            seen.push(k);
            scheme.set(k, v)?;
        }
        Ok(scheme)
    }
}

impl From<CompositionScheme> for String {
    fn from(s: CompositionScheme) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for CompositionScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_round_trips_and_is_ordered() {
        let s = CompositionScheme {
            encoding_scheme: EncodingScheme::SegmentEachExample,
            encoding_layer: LayerSelector::NegIndex(2),
            out_encoding_layer: LayerSelector::Middle,
            norm: Norm::VarNorm,
            word_agg: WordAgg::Pooled(WordFilter::NegActPlus, Pool::W1Mean),
            out_word_agg: WordAgg::Last,
            segment_agg: SegmentAgg::None,
            example_agg: ExampleAgg::SoftCluster,
            similarity: Similarity::Cosine,
        };
        let text = s.to_string();
        assert_eq!(
            text,
            "encoding_scheme=segment_each_example,ENCODING_LAYER=-2,OUT_ENCODING_LAYER=middle,\
             NORM=varNorm,WORD_AGG_SCHEME=-relu+|w1mean,OUT_WORD_AGG_SCHEME=last,\
             SEGMENT_AGG_SCHEME=None,EXAMPLE_AGG_SCHEME=soft_cluster,SIMILARITY_FUNC=cosine"
        );
        assert_eq!(text.parse::<CompositionScheme>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<CompositionScheme>(&json).unwrap(), s);
    }

    #[test]
    fn every_word_aggregation_round_trips() {
        let all = WordAgg::all();
        assert_eq!(all.len(), 11);
        for w in all {
            assert_eq!(w.to_string().parse::<WordAgg>().unwrap(), w);
        }
        assert_eq!(
            "relu_plus_w1mean".parse::<WordAgg>().unwrap(),
            WordAgg::Pooled(WordFilter::ActPlus, Pool::W1Mean)
        );
        assert_eq!(
            "neg_relu_mean".parse::<WordAgg>().unwrap(),
            WordAgg::Pooled(WordFilter::NegAct, Pool::Mean)
        );
        assert!("relu|max".parse::<WordAgg>().is_err());
    }

    #[test]
    fn aliases_and_partial_records() {
        let s: CompositionScheme = "encoding_scheme=concat_all_examples, SIMILARITY_FUNC=dot-product"
            .parse()
            .unwrap();
        assert_eq!(s.similarity, Similarity::Dot);
        assert_eq!(s.encoding_layer, LayerSelector::NegIndex(1));
        assert!("NORM=L2,NORM=None".parse::<CompositionScheme>().is_err());
        assert!("FOO=1".parse::<CompositionScheme>().is_err());
        assert!("ENCODING_LAYER=-0".parse::<CompositionScheme>().is_err());
    }

    #[test]
    fn layer_selectors_resolve() {
        assert_eq!(LayerSelector::NegIndex(1).resolve(6).unwrap(), Some(6));
        assert_eq!(LayerSelector::Index(6).resolve(6).unwrap(), Some(6));
        assert_eq!(LayerSelector::Middle.resolve(6).unwrap(), Some(3));
        assert_eq!(LayerSelector::NegIndex(7).resolve(6).unwrap(), Some(0));
        assert!(LayerSelector::NegIndex(8).resolve(6).is_err());
        assert!(LayerSelector::Index(7).resolve(6).is_err());
        assert_eq!(LayerSelector::E.resolve(6).unwrap(), None);
    }

    #[test]
    fn validation_rules() {
        let mut s = CompositionScheme {
            encoding_scheme: EncodingScheme::ConcatAllExamples,
            example_agg: ExampleAgg::SoftCluster,
            ..CompositionScheme::default()
        };
        let msg = s.validate(TestKind::Test1).unwrap_err().to_string();
        assert!(msg.contains("soft_cluster only valid in Test 2"), "{msg}");
        s.similarity = Similarity::Dot;
        s.validate(TestKind::Test2).unwrap();
        s.similarity = Similarity::None;
        assert!(s.validate(TestKind::Test2).is_err());
        let cross = CompositionScheme {
            norm: Norm::L2,
            ..CompositionScheme::default()
        };
        assert!(cross.validate(TestKind::Test1).is_err());
        let last = CompositionScheme {
            encoding_scheme: EncodingScheme::ConcatEachExample,
            word_agg: WordAgg::Last,
            ..CompositionScheme::default()
        };
        assert!(last.validate_for(TestKind::Test1, true).is_ok());
        assert!(last.validate_for(TestKind::Test1, false).is_err());
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = CompositionScheme::default().hash();
        assert_eq!(h.len(), 16);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(h, CompositionScheme::default().hash());
    }
}
