//! URL canonicalization, reference resolution and the URL-seen set.
//!
//! A [`CanonicalUrl`] is the identity key used by the frontier, the seen set
//! and the page store. Its rendering is also the on-disk key, so the rules
//! here are part of the file format:
//!
//! - scheme and host lowercased, scheme restricted to `http`/`https`
//! - default ports (80, 443) dropped
//! - dot segments removed, empty path rendered as `/`
//! - percent-escapes uppercased, escaped unreserved characters decoded
//! - query split on `&`, empty pieces dropped, pairs sorted by key then value
//! - fragment and userinfo dropped

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use thiserror::Error;
use url::Url;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UrlError {
    #[error("malformed url {0:?}")]
    MalformedUrl(String),
    #[error("unsupported scheme {0:?}")]
    UnsupportedScheme(String),
}

/// One `key[=value]` piece of a query string, kept percent-encoded.
///
/// `value` is `None` for a bare key (`?flag`) so that `?flag` and `?flag=`
/// stay distinct.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryPair {
    pub key: String,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalUrl {
    scheme: String,
    host: String,
    port: Option<u16>,
    path: String,
    query: Vec<QueryPair>,
}

impl CanonicalUrl {
    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    /// Explicit port, `None` when it is the scheme default.
    pub fn port(&self) -> Option<u16> {
        self.port
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn query(&self) -> &[QueryPair] {
        &self.query
    }

    /// `host[:port]` as it would appear in a `Host` header.
    pub fn authority(&self) -> String {
        match self.port {
            Some(p) => format!("{}:{}", self.host, p),
            None => self.host.clone(),
        }
    }

    /// Path plus rendered query, e.g. `/a/b?x=1`.
    pub fn path_and_query(&self) -> String {
        let mut out = self.path.clone();
        if !self.query.is_empty() {
            out.push('?');
            out.push_str(&render_query(&self.query));
        }
        out
    }

    pub fn render(&self) -> String {
        format!("{}://{}{}", self.scheme, self.authority(), self.path_and_query())
    }

    pub fn as_url(&self) -> Url {
        Url::parse(&self.render()).expect("canonical rendering always parses")
    }

    fn from_url(url: &Url, original: &str) -> Result<Self, UrlError> {
        let scheme = url.scheme().to_ascii_lowercase();
        if scheme != "http" && scheme != "https" {
            return Err(UrlError::UnsupportedScheme(scheme));
        }
        let host = match url.host_str() {
            Some(h) if !h.is_empty() => h.to_ascii_lowercase(),
            _ => return Err(UrlError::MalformedUrl(original.to_string())),
        };
        // `Url::port` already hides the scheme default.
        let port = url.port();
        let mut path = normalize_percent(url.path());
        if path.is_empty() {
            path.push('/');
        }
        let mut query: Vec<QueryPair> = url
            .query()
            .unwrap_or("")
            .split('&')
            .filter(|piece| !piece.is_empty())
            .map(|piece| match piece.split_once('=') {
                Some((k, v)) => QueryPair {
                    key: normalize_percent(k),
                    value: Some(normalize_percent(v)),
                },
                None => QueryPair {
                    key: normalize_percent(piece),
                    value: None,
                },
            })
            .collect();
        query.sort();
        Ok(CanonicalUrl {
            scheme,
            host,
            port,
            path,
            query,
        })
    }
}

impl fmt::Display for CanonicalUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for CanonicalUrl {
    type Err = UrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_url(s)
    }
}

fn render_query(pairs: &[QueryPair]) -> String {
    let mut out = String::new();
    for (i, p) in pairs.iter().enumerate() {
        if i > 0 {
            out.push('&');
        }
        out.push_str(&p.key);
        if let Some(v) = &p.value {
            out.push('=');
            out.push_str(v);
        }
    }
    out
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

/// Uppercase the hex digits of every percent-escape and decode escapes of
/// unreserved characters. Malformed escapes are left alone.
fn normalize_percent(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let hi = bytes[i + 1];
            let lo = bytes[i + 2];
            if hi.is_ascii_hexdigit() && lo.is_ascii_hexdigit() {
                let decoded = (hex_val(hi) << 4) | hex_val(lo);
                if is_unreserved(decoded) {
                    out.push(decoded as char);
                } else {
                    out.push('%');
                    out.push(hi.to_ascii_uppercase() as char);
                    out.push(lo.to_ascii_uppercase() as char);
                }
                i += 3;
                continue;
            }
        }
        // Input came from `Url`, which only emits ASCII.
        out.push(bytes[i] as char);
        i += 1;
    }
    out
}

fn hex_val(b: u8) -> u8 {
    match b {
        b'0'..=b'9' => b - b'0',
        b'a'..=b'f' => b - b'a' + 10,
        _ => b - b'A' + 10,
    }
}

fn classify_parse_error(text: &str) -> UrlError {
    let lowered = text.trim().to_ascii_lowercase();
    match lowered.split_once(':') {
        Some((scheme, _))
            if !scheme.is_empty()
                && scheme
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
                && scheme != "http"
                && scheme != "https"
                && !scheme.contains('.') =>
        {
            UrlError::UnsupportedScheme(scheme.to_string())
        }
        _ => UrlError::MalformedUrl(text.to_string()),
    }
}

/// Parse an absolute `http`/`https` URL and canonicalize it in one step.
pub fn parse_url(text: &str) -> Result<CanonicalUrl, UrlError> {
    let url = Url::parse(text.trim()).map_err(|_| classify_parse_error(text))?;
    CanonicalUrl::from_url(&url, text)
}

/// Resolve `reference` against `base` and canonicalize the result.
pub fn resolve(base: &CanonicalUrl, reference: &str) -> Result<CanonicalUrl, UrlError> {
    let joined = base
        .as_url()
        .join(reference.trim())
        .map_err(|_| classify_parse_error(reference))?;
    CanonicalUrl::from_url(&joined, reference)
}

/// The "URL seen" structure: every URL ever admitted to the frontier.
#[derive(Debug, Default)]
pub struct SeenSet {
    inner: Mutex<HashSet<CanonicalUrl>>,
}

impl SeenSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true exactly once per distinct URL. Linearizable.
    pub fn check_insert(&self, url: &CanonicalUrl) -> bool {
        let mut set = self.inner.lock().expect("seen set poisoned");
        if set.contains(url) {
            false
        } else {
            set.insert(url.clone())
        }
    }

    pub fn contains(&self, url: &CanonicalUrl) -> bool {
        self.inner.lock().expect("seen set poisoned").contains(url)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("seen set poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted listing, used by checkpoints.
    pub fn listing(&self) -> Vec<CanonicalUrl> {
        let mut all: Vec<_> = self
            .inner
            .lock()
            .expect("seen set poisoned")
            .iter()
            .cloned()
            .collect();
        all.sort();
        all
    }
}

impl FromIterator<CanonicalUrl> for SeenSet {
    fn from_iter<I: IntoIterator<Item = CanonicalUrl>>(iter: I) -> Self {
        SeenSet {
            inner: Mutex::new(iter.into_iter().collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn canon(s: &str) -> String {
        parse_url(s).unwrap().render()
    }

    #[test]
    fn identity_case() {
        let u = parse_url("http://example.com/").unwrap();
        assert_eq!(u.scheme(), "http");
        assert_eq!(u.host(), "example.com");
        assert_eq!(u.path(), "/");
        assert_eq!(u.port(), None);
        assert!(u.query().is_empty());
    }

    #[test]
    fn full_normalization() {
        assert_eq!(
            canon("HTTP://Example.COM:80/a/../b?z=1&a=2#f"),
            "http://example.com/b?a=2&z=1"
        );
    }

    #[test]
    fn ports_and_empty_path() {
        assert_eq!(canon("https://h:443"), "https://h/");
        assert_eq!(canon("https://h:80/x"), "https://h:80/x");
        assert_eq!(canon("http://h:8080"), "http://h:8080/");
    }

    #[test]
    fn percent_escapes_are_normalized() {
        assert_eq!(canon("http://h/%7euser/%2fx%3f"), "http://h/~user/%2Fx%3F");
        assert_eq!(canon("http://h/?q=%41%2a"), "http://h/?q=A%2A");
    }

    #[test]
    fn duplicate_keys_and_bare_keys_are_kept() {
        assert_eq!(canon("http://h/?b=2&a=1&b=1&flag"), "http://h/?a=1&b=1&b=2&flag");
        assert_ne!(canon("http://h/?flag"), canon("http://h/?flag="));
        assert_eq!(canon("http://h/?&&a=1&"), "http://h/?a=1");
        assert_eq!(canon("http://h/?"), "http://h/");
    }

    #[test]
    fn unsupported_and_malformed() {
        for s in ["mailto:x@y.z", "ftp://h/x", "javascript:void(0)", "data:text/plain,hi"] {
            assert!(
                matches!(parse_url(s), Err(UrlError::UnsupportedScheme(_))),
                "{s}"
            );
        }
        for s in ["", "example.com/x", "/relative", "http://", "http://:80/"] {
            assert!(matches!(parse_url(s), Err(UrlError::MalformedUrl(_))), "{s}");
        }
    }

    #[test]
    fn resolve_examples() {
        let base = parse_url("http://h/a/b").unwrap();
        assert_eq!(resolve(&base, "../c").unwrap().render(), "http://h/c");
        assert_eq!(resolve(&base, "").unwrap().render(), "http://h/a/b");
        let root = parse_url("http://h/").unwrap();
        assert_eq!(
            resolve(&root, "//other.com/x").unwrap().render(),
            "http://other.com/x"
        );
        assert!(matches!(
            resolve(&root, "mailto:a@b"),
            Err(UrlError::UnsupportedScheme(_))
        ));
    }

    /// Normal and abnormal examples from the RFC 3986 reference-resolution
    /// table, with the expected targets run through the canonical rules by
    /// hand (fragments dropped, queries sorted).
    #[test]
    fn rfc3986_reference_table() {
        let base = parse_url("http://a/b/c/d;p?q").unwrap();
        let cases = [
            ("g", "http://a/b/c/g"),
            ("./g", "http://a/b/c/g"),
            ("g/", "http://a/b/c/g/"),
            ("/g", "http://a/g"),
            ("//g", "http://g/"),
            ("?y", "http://a/b/c/d;p?y"),
            ("g?y", "http://a/b/c/g?y"),
            ("#s", "http://a/b/c/d;p?q"),
            ("g#s", "http://a/b/c/g"),
            ("g?y#s", "http://a/b/c/g?y"),
            (";x", "http://a/b/c/;x"),
            ("g;x", "http://a/b/c/g;x"),
            ("g;x?y#s", "http://a/b/c/g;x?y"),
            ("", "http://a/b/c/d;p?q"),
            (".", "http://a/b/c/"),
            ("./", "http://a/b/c/"),
            ("..", "http://a/b/"),
            ("../", "http://a/b/"),
            ("../g", "http://a/b/g"),
            ("../..", "http://a/"),
            ("../../", "http://a/"),
            ("../../g", "http://a/g"),
            ("../../../g", "http://a/g"),
            ("../../../../g", "http://a/g"),
            ("/./g", "http://a/g"),
            ("/../g", "http://a/g"),
            ("g.", "http://a/b/c/g."),
            (".g", "http://a/b/c/.g"),
            ("g..", "http://a/b/c/g.."),
            ("..g", "http://a/b/c/..g"),
            ("./../g", "http://a/b/g"),
            ("./g/.", "http://a/b/c/g/"),
            ("g/./h", "http://a/b/c/g/h"),
            ("g/../h", "http://a/b/c/h"),
            ("g;x=1/./y", "http://a/b/c/g;x=1/y"),
            ("g;x=1/../y", "http://a/b/c/y"),
            ("g?y/./x", "http://a/b/c/g?y/./x"),
            ("g?y/../x", "http://a/b/c/g?y/../x"),
            ("g#s/./x", "http://a/b/c/g"),
            ("g#s/../x", "http://a/b/c/g"),
        ];
        for (reference, expected) in cases {
            assert_eq!(
                resolve(&base, reference).unwrap().render(),
                expected,
                "reference {reference:?}"
            );
        }
    }

    #[test]
    fn gallery_variants_are_distinct_urls() {
        let seen = SeenSet::new();
        let mut firsts = 0;
        for sort in ["name", "date", "size", "rating"] {
            for thumb in ["small", "medium", "large"] {
                for format in ["jpg", "png"] {
                    for ugc in ["on", "off"] {
                        let u = parse_url(&format!(
                            "http://gallery.test/photos?sort={sort}&thumb={thumb}&format={format}&ugc={ugc}"
                        ))
                        .unwrap();
                        if seen.check_insert(&u) {
                            firsts += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(firsts, 48);
        assert_eq!(seen.len(), 48);
    }

    #[test]
    fn seen_insert_is_idempotent() {
        let seen = SeenSet::new();
        let u = parse_url("http://h/x").unwrap();
        assert!(seen.check_insert(&u));
        assert!(!seen.check_insert(&u));
        assert_eq!(seen.len(), 1);
    }

    #[test]
    fn seen_check_insert_is_linearizable() {
        let seen = Arc::new(SeenSet::new());
        let wins = Arc::new(AtomicUsize::new(0));
        let urls: Vec<CanonicalUrl> = (0..500)
            .map(|i| parse_url(&format!("http://h{}/p{}", i % 7, i)).unwrap())
            .collect();
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let seen = Arc::clone(&seen);
                let wins = Arc::clone(&wins);
                let mut mine = urls.clone();
                mine.rotate_left(t * 37);
                std::thread::spawn(move || {
                    for u in &mine {
                        if seen.check_insert(u) {
                            wins.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(wins.load(Ordering::SeqCst), 500);
        assert_eq!(seen.len(), 500);
    }

    fn url_strategy() -> impl Strategy<Value = String> {
        let scheme = prop_oneof![Just("http"), Just("HTTPS"), Just("Http")];
        let host = "[a-zA-Z][a-zA-Z0-9]{0,8}(\\.[a-zA-Z]{2,4})?";
        let port = prop_oneof![Just(String::new()), Just(":80".into()), Just(":443".into()), (1u16..9999).prop_map(|p| format!(":{p}"))];
        let seg = prop_oneof!["[a-zA-Z0-9_~-]{1,6}", Just("..".to_string()), Just(".".to_string()), "%[0-9a-fA-F]{2}"];
        let path = prop::collection::vec(seg, 0..5).prop_map(|v| {
            if v.is_empty() { String::new() } else { format!("/{}", v.join("/")) }
        });
        let pair = ("[a-z]{1,3}", prop::option::of("[a-zA-Z0-9%]{0,4}")).prop_map(|(k, v)| match v {
            Some(v) => format!("{k}={v}"),
            None => k,
        });
        let query = prop::collection::vec(pair, 0..5);
        let frag = prop::option::of("[a-z]{0,4}");
        (scheme, host, port, path, query, frag).prop_map(|(s, h, p, path, q, f)| {
            let mut out = format!("{s}://{h}{p}{path}");
            if !q.is_empty() {
                out.push('?');
                out.push_str(&q.join("&"));
            }
            if let Some(f) = f {
                out.push('#');
                out.push_str(&f);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent(text in url_strategy()) {
            let once = parse_url(&text).unwrap();
            let twice = parse_url(&once.render()).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(!once.render().contains('#'));
            prop_assert!(once.port() != Some(80) || once.scheme() != "http");
            prop_assert!(once.port() != Some(443) || once.scheme() != "https");
        }

        #[test]
        fn query_order_does_not_matter(
            pairs in prop::collection::vec(("[a-c]{1,2}", "[0-9]{0,2}"), 1..6),
            seed in any::<u64>(),
        ) {
            let render = |ps: &[(String, String)]| {
                let q: Vec<String> = ps.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("http://h/p?{}", q.join("&"))
            };
            let mut shuffled = pairs.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = ((seed >> (i % 60)) as usize + i * 7) % n;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(parse_url(&render(&pairs)).unwrap(), parse_url(&render(&shuffled)).unwrap());
        }
    }
}
