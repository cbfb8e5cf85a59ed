use super::{AppConfig, GuestError, GuestLink, GuestNode, History, NodeState};
use crate::tracking::NullSink;

/// Outcome of a standalone run with nodes calling the link in-process.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectRun {
    pub history: History,
    pub failure: Option<String>,
    /// Request/reply round trips performed.
    pub exchanges: usize,
}

/// Runs the app without the runtime: every node talks to the link through
/// a direct call. Nodes take turns in site-name order on a virtual clock.
pub fn run_direct(app: &AppConfig) -> Result<DirectRun, GuestError> {
    app.validate()?;
    let mut link = GuestLink::new(app, app.clients.keys().cloned());
    let mut nodes = app.clients.keys().map(|site| GuestNode::from_app(app, site)).collect::<Result<Vec<_>, _>>()?;
    let mut now = 0u64;
    let mut exchanges = 0usize;
    loop {
        let mut progressed = false;
        for node in nodes.iter_mut() {
            if let Some(req) = node.poll(now) {
                progressed = true;
                exchanges += 1;
                match link.handle_request(&req) {
                    Some(reply) => node.on_reply(now, &reply, &mut NullSink),
                    None => {
                        return Ok(DirectRun {
                            history: link.history().clone(),
                            failure: Some(format!("guest link stopped answering {}", node.site())),
                            exchanges,
                        })
                    }
                }
            }
        }
        if nodes.iter().all(GuestNode::is_finished) {
            break;
        }
        if !progressed {
            match nodes.iter().filter_map(GuestNode::next_wakeup).min() {
                Some(t) => now = t.max(now),
                None => break,
            }
        }
    }
    let failure = link.failure().map(str::to_string).or_else(|| {
        nodes.iter().find_map(|n| match n.state() {
            NodeState::Failed(r) => Some(format!("node {}: {r}", n.site())),
            _ => None,
        })
    });
    Ok(DirectRun { history: link.history().clone(), failure, exchanges })
}
