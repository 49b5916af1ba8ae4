//! Response body adapters used by the gateway.

use std::time::Duration;

use bytes::Bytes;
use futures_util::stream;
use http_body_util::{BodyExt, StreamBody};
use hyper::body::Frame;

use crate::http::{Body, BoxError};
use crate::rewrite::{HtmlRewriter, RewriteContext};

#[derive(Debug, thiserror::Error)]
#[error("body idle for longer than {0:?}")]
pub struct IdleTimeout(pub Duration);

/// Fails the body when no frame arrives within `idle`.
pub fn idle_timeout(body: Body, idle: Duration) -> Body {
    let frames = stream::unfold(Some(body), move |body| async move {
        let mut body = body?;
        match tokio::time::timeout(idle, body.frame()).await {
            Ok(Some(frame)) => Some((frame, Some(body))),
            Ok(None) => None,
            Err(_) => Some((Err(Box::new(IdleTimeout(idle)) as BoxError), None)),
        }
    });
    StreamBody::new(frames).boxed()
}

/// Streams `body` through the HTML rewriter. Trailers are dropped.
pub fn rewrite_body(body: Body, ctx: RewriteContext) -> Body {
    let state = Some((body, HtmlRewriter::new(ctx)));
    let frames = stream::unfold(state, |state| async move {
        let (mut body, mut rw) = state?;
        loop {
            match body.frame().await {
                Some(Ok(frame)) => {
                    let Ok(data) = frame.into_data() else {
                        continue;
                    };
                    let mut out = Vec::with_capacity(data.len() + 64);
                    rw.feed(&data, &mut out);
                    if !out.is_empty() {
                        return Some((Ok(Frame::data(Bytes::from(out))), Some((body, rw))));
                    }
                }
                Some(Err(e)) => return Some((Err(e), None)),
                None => {
                    let mut out = Vec::new();
                    rw.finish(&mut out);
                    if out.is_empty() {
                        return None;
                    }
                    return Some((Ok(Frame::data(Bytes::from(out))), None));
                }
            }
        }
    });
    StreamBody::new(frames).boxed()
}
