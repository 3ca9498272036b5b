//! Wire vocabulary exchanged between vehicles, roadside nodes, and the
//! cloud registry.
//!
//! A [`Message`] carries the sender and the sender's device timestamp; the
//! recipient is transport state and lives on the engine's transmission, not
//! in the payload. State machines emit [`Outgoing`] values and the engine
//! resolves addressing, channels, and loss.

use crate::globalview::{AbnormalEvent, Directory, GlobalView, InfraRecord, ViewDelta};
use crate::protocol::{DrivingIntent, VehicleStatus};
use crate::types::{Endpoint, RsmuId};
use serde::{Deserialize, Serialize};

/// How a vehicle asks for a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkRequestMode {
    /// Initial admission: the requester is inside the node's stretch and
    /// wants it as its managing node.
    Exclusive,
    /// Handover preparation: the requester is still managed by a neighbor
    /// and asks to be admitted ahead of crossing.
    PreAdmit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageBody {
    /// Periodic vehicle self-report to its managing node.
    StatusUpdate {
        status: VehicleStatus,
        intent: DrivingIntent,
    },
    /// Link admission or pre-admission request; carries fresh state so the
    /// node can admit without waiting for the first report.
    LinkRequest {
        mode: LinkRequestMode,
        handover_from: Option<RsmuId>,
        status: VehicleStatus,
        intent: DrivingIntent,
    },
    /// Node grants (or re-confirms) a link to the requesting vehicle.
    LinkAccept,
    /// Vehicle drops its link; `handoff_to` names the node now responsible,
    /// or none when the vehicle leaves the road.
    LinkRelease { handoff_to: Option<RsmuId> },
    /// Node shares its merged picture with a linked vehicle.
    ViewBroadcast { view: GlobalView },
    /// Node-to-node incremental (or full) view exchange.
    NeighborSync { delta: ViewDelta },
    /// Abnormal condition notification, also used node-to-node to spread a
    /// fresh detection along the chain.
    EventNotice { event: AbnormalEvent },
    /// Cloud bootstrap payload: directory of deployed nodes plus static
    /// infrastructure records.
    RegistrySnapshot {
        directory: Directory,
        infra: Vec<InfraRecord>,
    },
}

impl MessageBody {
    /// Short stable name used in logs and counters.
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::StatusUpdate { .. } => "status_update",
            MessageBody::LinkRequest { .. } => "link_request",
            MessageBody::LinkAccept => "link_accept",
            MessageBody::LinkRelease { .. } => "link_release",
            MessageBody::ViewBroadcast { .. } => "view_broadcast",
            MessageBody::NeighborSync { .. } => "neighbor_sync",
            MessageBody::EventNotice { .. } => "event_notice",
            MessageBody::RegistrySnapshot { .. } => "registry_snapshot",
        }
    }
}

/// A routed payload as seen by a receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: Endpoint,
    /// Sender's device clock at send time.
    pub device_ts_ms: f64,
    pub body: MessageBody,
}

/// Where an emission should go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Address {
    To(Endpoint),
    /// Discovery fallback: offer to every node in radio range, used when
    /// the directory has no entry covering the vehicle's position.
    BroadcastRsmus,
}

/// An emission staged by a state machine, before the engine resolves
/// transport.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: Address,
    pub body: MessageBody,
}

impl Outgoing {
    pub fn to_rsmu(id: RsmuId, body: MessageBody) -> Self {
        Outgoing {
            to: Address::To(Endpoint::Rsmu(id)),
            body,
        }
    }

    pub fn to_vehicle(id: crate::types::VehicleId, body: MessageBody) -> Self {
        Outgoing {
            to: Address::To(Endpoint::Viu(id)),
            body,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bodies_roundtrip_through_json() {
        let release = MessageBody::LinkRelease {
            handoff_to: Some(RsmuId(3)),
        };
        let json = serde_json::to_string(&release).unwrap();
        assert!(json.contains("link_release"));
        let back: MessageBody = serde_json::from_str(&json).unwrap();
        assert_eq!(back, release);
        assert_eq!(release.kind(), "link_release");

        let accept = serde_json::to_string(&MessageBody::LinkAccept).unwrap();
        assert_eq!(
            serde_json::from_str::<MessageBody>(&accept).unwrap(),
            MessageBody::LinkAccept
        );
    }
}
