//! Topic-based message delivery: reference-passing queues inside a process
//! and length-prefixed frames over local stream sockets between processes.

mod domain;
mod frame;
mod queue;

pub use domain::{DeliverySummary, Domain, Publisher, TransportError};
pub use frame::{
    decode_frame, encode_frame, read_frame, FrameError, MessageFrame, CONTROL_TOPIC, HEADER_LEN,
    MAX_PAYLOAD,
};
pub use queue::{
    Closed, Doorbell, Listener, Message, SubscriptionQueue, TopicId, DEFAULT_QUEUE_DEPTH,
};
