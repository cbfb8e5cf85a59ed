use super::protocol::{decode, encode, LinkReply, NodeRequest, Phase, PushResult};
use super::{true_weights, AppConfig, ClientApp, GuestError, SiteData};
use crate::tracking::ScalarSink;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeState {
    Starting,
    Idle { wake_at: u64 },
    Awaiting,
    Finished,
    Failed(String),
}

/// Client-side driver: one outstanding request at a time, register first,
/// then pull tasks and push results until the link says done.
#[derive(Debug)]
pub struct GuestNode {
    site: String,
    client: ClientApp,
    state: NodeState,
    queued: Option<NodeRequest>,
    poll_interval_ms: u64,
}

impl GuestNode {
    pub fn from_app(app: &AppConfig, site: &str) -> Result<Self, GuestError> {
        let cfg =
            app.clients.get(site).ok_or_else(|| GuestError::Config(format!("no client data configured for {site}")))?;
        let w = true_weights(app.task_seed, app.dimension);
        let dim =
            if app.faults.bad_dimension_site.as_deref() == Some(site) { app.dimension + 1 } else { app.dimension };
        let data = SiteData::generate_with_dim(&w, dim, cfg.seed, cfg.n_train, cfg.n_test, app.noise_std);
        Ok(GuestNode {
            site: site.to_string(),
            client: ClientApp::new(data, app.epochs, app.lr, app.batch_size),
            state: NodeState::Starting,
            queued: None,
            poll_interval_ms: app.poll_interval_ms,
        })
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, NodeState::Finished | NodeState::Failed(_))
    }

    /// The next request body, if the node has one to send at `now`.
    pub fn poll(&mut self, now: u64) -> Option<Vec<u8>> {
        let req = match self.state {
            NodeState::Starting => NodeRequest::Register { node: self.site.clone() },
            NodeState::Idle { wake_at } if now >= wake_at => {
                self.queued.take().unwrap_or_else(|| NodeRequest::Pull { node: self.site.clone() })
            }
            _ => return None,
        };
        self.state = NodeState::Awaiting;
        Some(encode(&req))
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        match self.state {
            NodeState::Starting => Some(0),
            NodeState::Idle { wake_at } => Some(wake_at),
            _ => None,
        }
    }

    pub fn on_reply(&mut self, now: u64, body: &[u8], sink: &mut dyn ScalarSink) {
        if self.state != NodeState::Awaiting {
            log::warn!("{}: unsolicited reply dropped", self.site);
            return;
        }
        let reply = match decode::<LinkReply>(body) {
            Ok(r) => r,
            Err(e) => {
                self.state = NodeState::Failed(e.to_string());
                return;
            }
        };
        self.state = match reply {
            LinkReply::Registered | LinkReply::Accepted => NodeState::Idle { wake_at: now },
            LinkReply::Wait => NodeState::Idle { wake_at: now + self.poll_interval_ms },
            LinkReply::Task { round, phase, model, config } => {
                let result = match phase {
                    Phase::Fit => self.client.fit(&model, &config, sink).map(PushResult::Fit),
                    Phase::Evaluate => self.client.evaluate(&model).map(PushResult::Evaluate),
                };
                let result = result.unwrap_or_else(|e| PushResult::Fault { reason: e.to_string() });
                self.queued = Some(NodeRequest::Push { node: self.site.clone(), round, phase, result });
                NodeState::Idle { wake_at: now }
            }
            LinkReply::Done => NodeState::Finished,
            LinkReply::Failed { reason } | LinkReply::Rejected { reason } => NodeState::Failed(reason),
        };
    }
}
