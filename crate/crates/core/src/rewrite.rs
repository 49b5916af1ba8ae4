//! Prefixing of root-relative URLs in proxied HTML.
//!
//! A backend application believes it is served from `/`, so a link such as
//! `<a href="/tree">` would escape the forward once it reaches the browser.
//! [`HtmlRewriter`] is a streaming tokenizer that inserts the forward prefix
//! in front of root-relative URLs found in `href`, `src`, `action` and
//! `content` attribute values, and in `url(...)` inside inline `style`
//! attributes. Comments, declarations and the contents of raw-text elements
//! (`<script>`, `<style>`, ...) are copied through untouched.
//!
//! The transformation holds back at most one start tag's worth of bytes
//! ([`MAX_TAG_LEN`]); a `<` whose tag does not close within that window is
//! treated as text.

use tracing::warn;

/// Longest start tag the rewriter buffers before giving up on it.
pub const MAX_TAG_LEN: usize = 64 * 1024;

const URL_ATTRS: [&[u8]; 4] = [b"href", b"src", b"action", b"content"];
const RAW_TEXT_ELEMENTS: [&[u8]; 6] = [b"script", b"style", b"textarea", b"title", b"xmp", b"noembed"];

/// Where rewritten links must point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteContext {
    prefix: String,
    backend: Option<String>,
}

impl RewriteContext {
    /// `prefix` must start with `/fw/` or `/fw2/` and carry no trailing
    /// slash. `backend` is the `node:port` authority the backend may use in
    /// absolute redirects.
    pub fn new(prefix: impl Into<String>, backend: Option<String>) -> Option<Self> {
        let prefix = prefix.into();
        let valid = (prefix.starts_with("/fw/") || prefix.starts_with("/fw2/"))
            && !prefix.ends_with('/');
        valid.then_some(Self { prefix, backend })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Prefixed form of a URL, or `None` when it must stay as is.
    fn rewrite_url(&self, url: &[u8]) -> Option<Vec<u8>> {
        if !is_root_relative(url) || self.is_prefixed(url) {
            return None;
        }
        let mut out = Vec::with_capacity(self.prefix.len() + url.len());
        out.extend_from_slice(self.prefix.as_bytes());
        out.extend_from_slice(url);
        Some(out)
    }

    fn is_prefixed(&self, url: &[u8]) -> bool {
        url.len() > self.prefix.len()
            && url.starts_with(self.prefix.as_bytes())
            && url[self.prefix.len()] == b'/'
    }
}

/// Root-relative: begins with `/` but not `//` (or the `/\` spelling
/// browsers treat the same way).
pub fn is_root_relative(url: &[u8]) -> bool {
    url.first() == Some(&b'/') && !matches!(url.get(1), Some(b'/') | Some(b'\\'))
}

/// True when the media type's essence is `text/html`.
pub fn should_rewrite(content_type: &str) -> bool {
    let essence = content_type.split(';').next().unwrap_or("").trim();
    essence.eq_ignore_ascii_case("text/html")
}

/// False for charsets whose bytes cannot be scanned as ASCII.
pub fn is_ascii_compatible(content_type: &str) -> bool {
    for param in content_type.split(';').skip(1) {
        let Some((key, value)) = param.split_once('=') else {
            continue;
        };
        if key.trim().eq_ignore_ascii_case("charset") {
            let cs = value.trim().trim_matches('"').to_ascii_lowercase();
            if cs.starts_with("utf-16") || cs.starts_with("utf-32") || cs.starts_with("ucs-") {
                warn!(charset = %cs, "not rewriting non-ASCII-compatible document");
                return false;
            }
        }
    }
    true
}

/// Rewrites a whole document in one call.
pub fn rewrite_html(body: &[u8], ctx: &RewriteContext) -> Vec<u8> {
    let mut rw = HtmlRewriter::new(ctx.clone());
    let mut out = Vec::with_capacity(body.len() + body.len() / 8);
    rw.feed(body, &mut out);
    rw.finish(&mut out);
    out
}

/// Rewrites a `Location` header value.
///
/// Root-relative values get the prefix; absolute URLs pointing at the
/// backend's own authority become prefix + path; anything else is kept.
pub fn rewrite_location(value: &str, ctx: &RewriteContext) -> String {
    if let Some(new) = ctx.rewrite_url(value.as_bytes()) {
        return String::from_utf8(new).expect("prefix and value are UTF-8");
    }
    let Some(backend) = &ctx.backend else {
        return value.to_string();
    };
    let Some((scheme, after)) = value.split_once("://") else {
        return value.to_string();
    };
    if !scheme.eq_ignore_ascii_case("http") && !scheme.eq_ignore_ascii_case("https") {
        return value.to_string();
    }
    let end = after.find(['/', '?', '#']).unwrap_or(after.len());
    let (authority, tail) = after.split_at(end);
    if !authority.eq_ignore_ascii_case(backend) {
        return value.to_string();
    }
    if tail.starts_with('/') {
        format!("{}{tail}", ctx.prefix)
    } else {
        format!("{}/{tail}", ctx.prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Text,
    /// Inside `<!-- ... -->`.
    Comment,
    /// Copying through the next `>`.
    UntilGt,
    /// Inside a raw-text element; holds the index into `RAW_TEXT_ELEMENTS`.
    RawText(usize),
}

/// Incremental HTML rewriter; one per response body.
#[derive(Debug)]
pub struct HtmlRewriter {
    ctx: RewriteContext,
    state: State,
    pending: Vec<u8>,
}

impl HtmlRewriter {
    pub fn new(ctx: RewriteContext) -> Self {
        Self {
            ctx,
            state: State::Text,
            pending: Vec::new(),
        }
    }

    /// Consumes `chunk`, appending every byte that can be decided to `out`.
    pub fn feed(&mut self, chunk: &[u8], out: &mut Vec<u8>) {
        if self.pending.is_empty() {
            let used = self.process(chunk, false, out);
            self.pending.extend_from_slice(&chunk[used..]);
        } else {
            self.pending.extend_from_slice(chunk);
            let buf = std::mem::take(&mut self.pending);
            let used = self.process(&buf, false, out);
            self.pending = buf;
            self.pending.drain(..used);
        }
    }

    /// Flushes whatever is still held back.
    pub fn finish(&mut self, out: &mut Vec<u8>) {
        let buf = std::mem::take(&mut self.pending);
        let used = self.process(&buf, true, out);
        debug_assert_eq!(used, buf.len());
    }

    /// Returns how many bytes of `buf` were consumed.
    fn process(&mut self, buf: &[u8], eof: bool, out: &mut Vec<u8>) -> usize {
        let mut i = 0;
        while i < buf.len() {
            match self.state {
                State::Text => {
                    let Some(lt) = memchr(b'<', &buf[i..]) else {
                        out.extend_from_slice(&buf[i..]);
                        return buf.len();
                    };
                    out.extend_from_slice(&buf[i..i + lt]);
                    i += lt;
                    match self.markup(&buf[i..], eof, out) {
                        Some(n) => i += n,
                        None => return i,
                    }
                }
                State::Comment => match find(&buf[i..], b"-->") {
                    Some(at) => {
                        out.extend_from_slice(&buf[i..i + at + 3]);
                        i += at + 3;
                        self.state = State::Text;
                    }
                    None => {
                        let keep = if eof { 0 } else { 2 };
                        let upto = buf.len().saturating_sub(keep).max(i);
                        out.extend_from_slice(&buf[i..upto]);
                        return upto;
                    }
                },
                State::UntilGt => match memchr(b'>', &buf[i..]) {
                    Some(at) => {
                        out.extend_from_slice(&buf[i..=i + at]);
                        i += at + 1;
                        self.state = State::Text;
                    }
                    None => {
                        out.extend_from_slice(&buf[i..]);
                        return buf.len();
                    }
                },
                State::RawText(idx) => {
                    let name = RAW_TEXT_ELEMENTS[idx];
                    match find_end_tag(&buf[i..], name) {
                        Some(at) => {
                            out.extend_from_slice(&buf[i..i + at]);
                            i += at;
                            self.state = State::Text;
                        }
                        None => {
                            // Hold back a possible partial "</name".
                            let keep = if eof { 0 } else { name.len() + 2 };
                            let upto = buf.len().saturating_sub(keep).max(i);
                            out.extend_from_slice(&buf[i..upto]);
                            return upto;
                        }
                    }
                }
            }
        }
        i
    }

    /// Handles markup starting at `buf[0] == b'<'`. Returns bytes consumed,
    /// or `None` if more input is needed to decide.
    fn markup(&mut self, buf: &[u8], eof: bool, out: &mut Vec<u8>) -> Option<usize> {
        debug_assert_eq!(buf[0], b'<');
        let next = match buf.get(1) {
            Some(&b) => b,
            None if eof => {
                out.push(b'<');
                return Some(1);
            }
            None => return None,
        };
        match next {
            b'!' => {
                if buf.len() < 4 && !eof && b"<!--".starts_with(buf) {
                    return None;
                }
                if buf.starts_with(b"<!--") {
                    out.extend_from_slice(b"<!--");
                    self.state = State::Comment;
                    return Some(4);
                }
                out.extend_from_slice(&buf[..2]);
                self.state = State::UntilGt;
                Some(2)
            }
            b'?' | b'/' => {
                out.extend_from_slice(&buf[..2]);
                self.state = State::UntilGt;
                Some(2)
            }
            b if b.is_ascii_alphabetic() => {
                let window = &buf[..buf.len().min(MAX_TAG_LEN)];
                match parse_start_tag(window) {
                    Some(tag) => {
                        self.emit_tag(&buf[..tag.len], &tag, out);
                        if let Some(idx) = RAW_TEXT_ELEMENTS
                            .iter()
                            .position(|n| n.eq_ignore_ascii_case(&buf[1..tag.name_end]))
                        {
                            self.state = State::RawText(idx);
                        }
                        Some(tag.len)
                    }
                    None if eof || buf.len() >= MAX_TAG_LEN => {
                        out.push(b'<');
                        Some(1)
                    }
                    None => None,
                }
            }
            _ => {
                out.push(b'<');
                Some(1)
            }
        }
    }

    fn emit_tag(&self, tag_bytes: &[u8], tag: &StartTag, out: &mut Vec<u8>) {
        let mut copied = 0;
        for attr in &tag.attrs {
            let Some((vs, ve)) = attr.value else { continue };
            let name = &tag_bytes[attr.name.0..attr.name.1];
            let value = &tag_bytes[vs..ve];
            if URL_ATTRS.iter().any(|a| a.eq_ignore_ascii_case(name)) {
                if self.ctx.rewrite_url(value).is_some() {
                    out.extend_from_slice(&tag_bytes[copied..vs]);
                    out.extend_from_slice(self.ctx.prefix.as_bytes());
                    copied = vs;
                }
            } else if name.eq_ignore_ascii_case(b"style") {
                for at in style_url_starts(value) {
                    if self.ctx.rewrite_url(&value[at..]).is_some() {
                        out.extend_from_slice(&tag_bytes[copied..vs + at]);
                        out.extend_from_slice(self.ctx.prefix.as_bytes());
                        copied = vs + at;
                    }
                }
            }
        }
        out.extend_from_slice(&tag_bytes[copied..]);
    }
}

#[derive(Debug)]
struct Attr {
    name: (usize, usize),
    value: Option<(usize, usize)>,
}

#[derive(Debug)]
struct StartTag {
    /// End of the tag name (exclusive), counted from the `<`.
    name_end: usize,
    attrs: Vec<Attr>,
    /// Total length including the closing `>`.
    len: usize,
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0c')
}

/// Tokenizes a start tag at `buf[0] == b'<'`. `None` if it does not close
/// within `buf`.
fn parse_start_tag(buf: &[u8]) -> Option<StartTag> {
    let mut i = 1;
    while i < buf.len() && !is_space(buf[i]) && buf[i] != b'/' && buf[i] != b'>' {
        i += 1;
    }
    let name_end = i;
    let mut attrs = Vec::new();
    loop {
        while i < buf.len() && (is_space(buf[i]) || buf[i] == b'/') {
            i += 1;
        }
        match buf.get(i) {
            None => return None,
            Some(b'>') => {
                return Some(StartTag {
                    name_end,
                    attrs,
                    len: i + 1,
                })
            }
            Some(_) => {}
        }

        let name_start = i;
        // The first character may be '='.
        i += 1;
        while i < buf.len() && !is_space(buf[i]) && !matches!(buf[i], b'/' | b'>' | b'=') {
            i += 1;
        }
        let name = (name_start, i);
        while i < buf.len() && is_space(buf[i]) {
            i += 1;
        }
        if i >= buf.len() {
            return None;
        }
        if buf[i] != b'=' {
            attrs.push(Attr { name, value: None });
            continue;
        }
        i += 1;
        while i < buf.len() && is_space(buf[i]) {
            i += 1;
        }
        let &first = buf.get(i)?;
        let value = if first == b'"' || first == b'\'' {
            let close = memchr(first, &buf[i + 1..])?;
            let v = (i + 1, i + 1 + close);
            i = i + 2 + close;
            v
        } else if first == b'>' {
            (i, i)
        } else {
            let start = i;
            while i < buf.len() && !is_space(buf[i]) && buf[i] != b'>' {
                i += 1;
            }
            if i >= buf.len() {
                return None;
            }
            (start, i)
        };
        attrs.push(Attr {
            name,
            value: Some(value),
        });
    }
}

/// Offsets within a style value where a `url(...)` argument begins.
fn style_url_starts(style: &[u8]) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut i = 0;
    while i + 4 <= style.len() {
        if style[i..i + 4].eq_ignore_ascii_case(b"url(") {
            let mut j = i + 4;
            while j < style.len() && is_space(style[j]) {
                j += 1;
            }
            if j < style.len() && (style[j] == b'"' || style[j] == b'\'') {
                j += 1;
            }
            starts.push(j);
            i = j;
        } else {
            i += 1;
        }
    }
    starts
}

/// Offset of `</name` (case-insensitive) followed by a tag terminator.
fn find_end_tag(buf: &[u8], name: &[u8]) -> Option<usize> {
    let mut from = 0;
    while let Some(at) = find(&buf[from..], b"</") {
        let start = from + at;
        let name_at = start + 2;
        let after = name_at + name.len();
        if after < buf.len()
            && buf[name_at..after].eq_ignore_ascii_case(name)
            && (is_space(buf[after]) || buf[after] == b'>' || buf[after] == b'/')
        {
            return Some(start);
        }
        if after >= buf.len() {
            return None;
        }
        from = start + 1;
    }
    None
}

fn memchr(needle: u8, haystack: &[u8]) -> Option<usize> {
    haystack.iter().position(|&b| b == needle)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
