"""Hand-written reference machine of the compliant server under the full ECDH alphabet.

States: 0 BPP START, 1 ALG NEGOTIATION DONE, 2 KEYS DERIVED, 3 KEX COMPLETE,
4 AUTH START, 5 closed sink. Once the handshake is over, optional transport
messages are ignored and authentication attempts fail, as RFC 4253/4252
require; everything else closes the connection.
"""
from kexlearn.alphabet import default_alphabet
from kexlearn.mapper import CONNECTION_CLOSED, NO_RESPONSE
from kexlearn.mealy import build_machine

SINK = 5
HANDSHAKE_STATES = (0, 1, 2)
OPTIONAL = ("IGNORE", "UNIMPLEMENTED", "DEBUG")
AUTH = ("USERAUTH_REQUEST_NONE", "USERAUTH_REQUEST_PASSWORD", "USERAUTH_REQUEST_PUBLICKEY")


def compliant_reference():
    inputs = [s.name for s in default_alphabet()]
    edges = {
        (0, "KEXINIT"): (1, "KEXINIT"),
        (1, "KEX_ECDH_INIT"): (2, "KEX_ECDH_REPLY|NEWKEYS"),
        (2, "NEWKEYS"): (3, NO_RESPONSE),
        (3, "SERVICE_REQUEST"): (4, "SERVICE_ACCEPT"),
    }
    for name in OPTIONAL:
        edges[(3, name)] = (3, NO_RESPONSE)
        edges[(4, name)] = (4, NO_RESPONSE)
    for name in AUTH:
        edges[(4, name)] = (4, "USERAUTH_FAILURE")
    return build_machine(inputs, edges, default=(SINK, CONNECTION_CLOSED))
