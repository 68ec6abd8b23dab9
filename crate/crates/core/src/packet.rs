//! Simulator-native packets.

/// Host index in `0..topology.host_count()`.
pub type HostId = u16;
/// Flow index into the simulation's flow table.
pub type FlowId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Data,
    Ack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub kind: PacketKind,
    pub flow: FlowId,
    pub src: HostId,
    pub dst: HostId,
    /// Data: byte offset of the payload. Ack: cumulative ack number.
    pub seq: u64,
    /// Bytes on the wire.
    pub size: u32,
    /// ECN-capable transport.
    pub ect: bool,
    /// Congestion Experienced codepoint.
    pub ce: bool,
    /// ECN-Echo flag on ACKs.
    pub ece: bool,
    /// Send timestamp of the data packet; echoed back on its ACK.
    pub ts: u64,
}

impl Packet {
    pub fn data(flow: FlowId, src: HostId, dst: HostId, seq: u64, size: u32, ts: u64) -> Self {
        Packet {
            kind: PacketKind::Data,
            flow,
            src,
            dst,
            seq,
            size,
            ect: true,
            ce: false,
            ece: false,
            ts,
        }
    }

    /// Builds the ACK for a received data packet, echoing CE as ECE.
    pub fn ack_for(data: &Packet, ack_no: u64, size: u32) -> Self {
        Packet {
            kind: PacketKind::Ack,
            flow: data.flow,
            src: data.dst,
            dst: data.src,
            seq: ack_no,
            size,
            ect: false,
            ce: false,
            ece: data.ce,
            ts: data.ts,
        }
    }

    pub fn is_data(&self) -> bool {
        self.kind == PacketKind::Data
    }
}
