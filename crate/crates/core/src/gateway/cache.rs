//! Per-PV cache entry lifecycle.
//!
//! ```text
//!            subscribe / connected          last unsubscribe
//! CONNECTING ----------------------> ACTIVE ----------------> INACTIVE
//!     ^                               |  ^                       |
//!     |          upstream lost        |  |  subscribe (in hold)  |
//!     +-------------------------------+  +-----------------------+
//!                                                                | tick past hold
//!                                                                v
//!                                                             EVICTED
//! ```
//!
//! [`CacheEntry::transition`] is pure: it returns the next entry and the
//! actions the gateway must perform, and never touches the network itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{ConnId, Millis};
use crate::proto::{ChannelValue, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheState {
    Connecting,
    Active,
    Inactive,
    Evicted,
}

/// A downstream subscription: client connection plus its channel id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subscriber {
    pub conn: ConnId,
    pub cid: u32,
}

/// Upstream binding: configured upstream index and the gateway's channel id
/// on that IOC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UpstreamRef {
    pub upstream: usize,
    pub cid: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub pv: String,
    pub state: CacheState,
    pub upstream: Option<UpstreamRef>,
    pub last_value: Option<ChannelValue>,
    pub subscribers: BTreeSet<Subscriber>,
    pub hold_deadline: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheEvent {
    ClientSubscribe(Subscriber),
    ClientUnsubscribe(Subscriber),
    /// The upstream channel was created (CHAN_OK).
    UpstreamConnected,
    /// Monitor update from the IOC.
    UpstreamEvent(ChannelValue),
    /// Value fetched by an explicit upstream READ.
    UpstreamRead(ChannelValue),
    UpstreamLost,
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheAction {
    SendEventAdd,
    SendEventCancel,
    SendClearChan,
    Post {
        to: Vec<Subscriber>,
        value: ChannelValue,
    },
    ScheduleResolve,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("illegal transition: {event} in state {state:?} for {pv}")]
    IllegalTransition {
        pv: String,
        state: CacheState,
        event: String,
    },
}

impl CacheEntry {
    pub fn new(pv: impl Into<String>) -> Self {
        CacheEntry {
            pv: pv.into(),
            state: CacheState::Connecting,
            upstream: None,
            last_value: None,
            subscribers: BTreeSet::new(),
            hold_deadline: None,
        }
    }

    fn post_to(to: Vec<Subscriber>, value: &Option<ChannelValue>) -> Option<CacheAction> {
        match value {
            Some(v) if !to.is_empty() => Some(CacheAction::Post {
                to,
                value: v.clone(),
            }),
            _ => None,
        }
    }

    fn all_subscribers(&self) -> Vec<Subscriber> {
        self.subscribers.iter().copied().collect()
    }

    /// Applies `event` at `now`; `hold` is the hold window in milliseconds.
    pub fn transition(
        mut self,
        event: CacheEvent,
        now: Millis,
        hold: Millis,
    ) -> Result<(CacheEntry, Vec<CacheAction>), CacheError> {
        use CacheAction as A;
        use CacheEvent as E;
        use CacheState as S;

        let mut actions = Vec::new();
        match (self.state, event) {
            (S::Evicted, event) => {
                return Err(CacheError::IllegalTransition {
                    pv: self.pv,
                    state: S::Evicted,
                    event: format!("{event:?}"),
                })
            }

            (S::Connecting, E::ClientSubscribe(sub)) => {
                if self.subscribers.insert(sub) {
                    self.hold_deadline = None;
                    actions.extend(Self::post_to(vec![sub], &self.last_value));
                }
            }
            (S::Connecting, E::ClientUnsubscribe(sub)) => {
                if self.subscribers.remove(&sub) && self.subscribers.is_empty() {
                    self.hold_deadline = Some(now + hold);
                }
            }
            (S::Connecting, E::UpstreamConnected) => {
                if self.subscribers.is_empty() {
                    self.state = S::Inactive;
                    self.hold_deadline = Some(self.hold_deadline.unwrap_or(now + hold));
                } else {
                    self.state = S::Active;
                    self.hold_deadline = None;
                    actions.push(A::SendEventAdd);
                }
            }
            (S::Connecting, E::UpstreamEvent(v) | E::UpstreamRead(v)) => {
                self.last_value = Some(v);
            }
            (S::Connecting, E::UpstreamLost) => actions.push(A::ScheduleResolve),
            (S::Connecting, E::Tick) => {
                if self.subscribers.is_empty() && self.hold_deadline.is_some_and(|d| now > d) {
                    self.state = S::Evicted;
                }
            }

            (S::Active, E::ClientSubscribe(sub)) => {
                if self.subscribers.insert(sub) {
                    actions.extend(Self::post_to(vec![sub], &self.last_value));
                }
            }
            (S::Active, E::ClientUnsubscribe(sub)) => {
                if self.subscribers.remove(&sub) && self.subscribers.is_empty() {
                    self.state = S::Inactive;
                    self.hold_deadline = Some(now + hold);
                    actions.push(A::SendEventCancel);
                }
            }
            (S::Active, E::UpstreamConnected) => {}
            (S::Active, E::UpstreamEvent(v)) => {
                // the first event after EVENT_ADD repeats a value subscribers
                // already have when the entry was revived from the hold
                if self.last_value.as_ref() != Some(&v) {
                    self.last_value = Some(v);
                    actions.extend(Self::post_to(self.all_subscribers(), &self.last_value));
                }
            }
            (S::Active, E::UpstreamRead(v)) => {
                if self
                    .last_value
                    .as_ref()
                    .is_none_or(|old| v.timestamp >= old.timestamp)
                {
                    self.last_value = Some(v);
                }
            }
            (S::Active, E::UpstreamLost) => {
                self.state = S::Connecting;
                self.upstream = None;
                if let Some(v) = &mut self.last_value {
                    v.severity = Severity::Invalid;
                }
                actions.extend(Self::post_to(self.all_subscribers(), &self.last_value));
                actions.push(A::ScheduleResolve);
            }
            (S::Active, E::Tick) => {}

            (S::Inactive, E::ClientSubscribe(sub)) => {
                self.subscribers.insert(sub);
                self.state = S::Active;
                self.hold_deadline = None;
                actions.push(A::SendEventAdd);
                actions.extend(Self::post_to(vec![sub], &self.last_value));
            }
            (S::Inactive, E::ClientUnsubscribe(_)) => {}
            (S::Inactive, E::UpstreamConnected) => {}
            (S::Inactive, E::UpstreamEvent(v) | E::UpstreamRead(v)) => {
                self.last_value = Some(v);
            }
            (S::Inactive, E::UpstreamLost) => {
                self.state = S::Connecting;
                self.upstream = None;
                if let Some(v) = &mut self.last_value {
                    v.severity = Severity::Invalid;
                }
                actions.push(A::ScheduleResolve);
            }
            (S::Inactive, E::Tick) => {
                if self.hold_deadline.is_some_and(|d| now > d) {
                    self.state = S::Evicted;
                    actions.push(A::SendClearChan);
                }
            }
        }
        Ok((self, actions))
    }
}

/// Free-function form of [`CacheEntry::transition`].
pub fn cache_transition(
    entry: CacheEntry,
    event: CacheEvent,
    now: Millis,
    hold: Millis,
) -> Result<(CacheEntry, Vec<CacheAction>), CacheError> {
    entry.transition(event, now, hold)
}
