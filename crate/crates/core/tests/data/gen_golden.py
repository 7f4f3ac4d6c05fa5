#!/usr/bin/env python3
"""Independent reference encodings for the golden-vector test.

Frames are encoded from the documented layout, key derivation uses hmac from
the standard library, and packet and header protection use the
`cryptography` package. Run from this directory to regenerate golden.json.
"""

import hashlib
import hmac
import ipaddress
import json
import struct

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305


def varint(v):
    if v < 1 << 6:
        return bytes([v])
    if v < 1 << 14:
        return struct.pack(">H", v | 0x4000)
    if v < 1 << 30:
        return struct.pack(">I", v | 0x8000_0000)
    return struct.pack(">Q", v | 0xC000_0000_0000_0000)


def vbytes(b):
    return varint(len(b)) + b


def cid(h):
    b = bytes.fromhex(h)
    return bytes([len(b)]) + b


def u16(v):
    return struct.pack(">H", v)


MC = 0x6D6300


def limits_bytes(l):
    flags = (1 if l["allow_ipv4"] else 0) | (2 if l["allow_ipv6"] else 0)
    out = bytes([flags]) + varint(len(l["supported_hash_ids"]))
    out += b"".join(u16(h) for h in l["supported_hash_ids"])
    out += varint(len(l["supported_aead_ids"]))
    out += b"".join(u16(a) for a in l["supported_aead_ids"])
    out += varint(l["max_aggregate_rate_kbps"])
    out += varint(l["max_channels_announced"]) + varint(l["max_channels_joined"])
    return out


def ack_bytes(ranges, delay):
    first = ranges[0]
    out = varint(first["end"]) + varint(delay) + varint(len(ranges) - 1)
    out += varint(first["end"] - first["start"])
    prev = first["start"]
    for r in ranges[1:]:
        out += varint(prev - r["end"] - 2) + varint(r["end"] - r["start"])
        prev = r["start"]
    return out


STATES = {"announced": 0, "join_pending": 1, "joined": 2, "declined_join": 3, "left": 4, "retired": 5}


def frame_bytes(f):
    t = f["type"]
    if t == "announce":
        src = ipaddress.ip_address(f["source_ip"])
        grp = ipaddress.ip_address(f["group_ip"])
        return (varint(MC) + cid(f["channel_id"]) + bytes([src.version]) + src.packed + grp.packed
                + u16(f["udp_port"]) + u16(f["aead_id"]) + u16(f["hash_id"])
                + vbytes(bytes.fromhex(f["header_secret"])) + varint(f["max_rate_kbps"]))
    if t == "join":
        return varint(MC + 1) + cid(f["channel_id"])
    if t == "leave":
        return varint(MC + 2) + cid(f["channel_id"]) + varint(f["reason_code"])
    if t == "retire":
        return varint(MC + 3) + cid(f["channel_id"])
    if t == "state":
        return (varint(MC + 4) + cid(f["channel_id"]) + bytes([STATES[f["new_state"]]])
                + varint(f["reason_code"]))
    if t == "integrity":
        ds = [bytes.fromhex(d) for d in f["digests"]]
        return (varint(MC + 5) + cid(f["channel_id"]) + varint(f["start_packet_number"])
                + bytes([len(ds[0])]) + varint(sum(map(len, ds))) + b"".join(ds))
    if t == "key":
        return (varint(MC + 6) + cid(f["channel_id"]) + varint(f["from_packet_number"])
                + vbytes(bytes.fromhex(f["secret"])))
    if t == "ack":
        return varint(MC + 7) + cid(f["channel_id"]) + ack_bytes(f["ack_ranges"], f["ack_delay"])
    if t == "limits":
        return varint(MC + 8) + limits_bytes(f["limits"])
    raise ValueError(t)


LIMITS = {
    "allow_ipv4": True,
    "allow_ipv6": True,
    "supported_hash_ids": [4, 5],
    "supported_aead_ids": [0x1301, 0x1303],
    "max_aggregate_rate_kbps": 30000,
    "max_channels_announced": 16,
    "max_channels_joined": 4,
}

FRAMES = [
    {"type": "announce", "channel_id": "c0ffee0001", "source_ip": "10.0.0.1",
     "group_ip": "232.1.1.1", "udp_port": 4433, "aead_id": 0x1301, "hash_id": 4,
     "header_secret": "00" * 8 + "11" * 8 + "22" * 16, "max_rate_kbps": 40000},
    {"type": "announce", "channel_id": "0102030405060708090a0b0c0d0e0f1011121314",
     "source_ip": "2001:db8::1", "group_ip": "ff3e::8000:1", "udp_port": 5000,
     "aead_id": 0x1303, "hash_id": 5, "header_secret": "ab" * 16, "max_rate_kbps": 63},
    {"type": "join", "channel_id": "c0ffee0001"},
    {"type": "leave", "channel_id": "c0ffee0001", "reason_code": 2},
    {"type": "retire", "channel_id": "07"},
    {"type": "state", "channel_id": "c0ffee0001", "new_state": "declined_join", "reason_code": 8},
    {"type": "state", "channel_id": "c0ffee0001", "new_state": "joined", "reason_code": 0},
    {"type": "integrity", "channel_id": "c0ffee0001", "start_packet_number": 16400,
     "digests": [hashlib.sha256(bytes([i])).hexdigest() for i in range(3)]},
    {"type": "key", "channel_id": "c0ffee0001", "from_packet_number": 1024,
     "secret": bytes(range(32)).hex()},
    {"type": "ack", "channel_id": "c0ffee0001",
     "ack_ranges": [{"start": 90, "end": 100}, {"start": 70, "end": 80}, {"start": 0, "end": 5}],
     "ack_delay": 3125},
    {"type": "limits", "limits": LIMITS},
]

VARINTS = [0, 37, 63, 64, 15293, 16383, 16384, 494878333, 1073741823, 1073741824,
           151288809941952652, (1 << 62) - 1]


def params_bytes(p):
    out = b""
    if p.get("initial_max_data") is not None:
        out += varint(0x04) + vbytes(varint(p["initial_max_data"]))
    if p.get("multicast_supported"):
        out += varint(0x6D6301) + varint(0)
    if p.get("client_limits") is not None:
        out += varint(0x6D6302) + vbytes(limits_bytes(p["client_limits"]))
    return out


PARAMS = [
    {"multicast_supported": True, "client_limits": None, "initial_max_data": None},
    {"multicast_supported": False, "client_limits": LIMITS, "initial_max_data": 1048576},
]

# Crypto.

AEADS = {
    "aes128gcm": (0x1301, 16, hashlib.sha256),
    "aes256gcm": (0x1302, 32, hashlib.sha384),
    "chacha20poly1305": (0x1303, 32, hashlib.sha256),
}


def expand_label(h, secret, label, length):
    info = struct.pack(">H", length) + bytes([len(label)]) + label + b"\x00"
    out, t, i = b"", b"", 1
    while len(out) < length:
        t = hmac.new(secret, t + info + bytes([i]), h).digest()
        out += t
        i += 1
    return out[:length]


def hp_mask(name, key, sample):
    if name == "chacha20poly1305":
        c = Cipher(algorithms.ChaCha20(key, sample), mode=None).encryptor()
        return c.update(b"\x00" * 5)
    c = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return (c.update(sample) + c.finalize())[:5]


def seal(name, key, nonce, aad, plain):
    if name == "chacha20poly1305":
        return ChaCha20Poly1305(key).encrypt(nonce, plain, aad)
    return AESGCM(key).encrypt(nonce, plain, aad)


def crypto_vector(name, secret, header_secret, channel_id, pn, payload):
    _, klen, h = AEADS[name]
    key = expand_label(h, secret, b"mcquic key", klen)
    iv = expand_label(h, secret, b"mcquic iv", 12)
    hp = expand_label(h, header_secret, b"mcquic hp", klen)
    nonce = iv[:4] + bytes(a ^ b for a, b in zip(iv[4:], pn.to_bytes(8, "big")))
    header = bytes([0x40 | 3]) + cid(channel_id) + (pn & 0xFFFFFFFF).to_bytes(4, "big")
    sealed = header + seal(name, key, nonce, header, payload)
    pn_offset = 2 + len(bytes.fromhex(channel_id))
    sample = sealed[pn_offset + 4:pn_offset + 20]
    mask = hp_mask(name, hp, sample)
    out = bytearray(sealed)
    out[0] ^= mask[0] & 0x1F
    for i in range(4):
        out[pn_offset + i] ^= mask[1 + i]
    return {
        "aead": name,
        "secret": secret.hex(),
        "header_secret": header_secret.hex(),
        "channel_id": channel_id,
        "packet_number": pn,
        "payload": payload.hex(),
        "key": key.hex(),
        "iv": iv.hex(),
        "hp_key": hp.hex(),
        "sample": sample.hex(),
        "mask": mask.hex(),
        "protected": bytes(out).hex(),
        "sha256": hashlib.sha256(bytes(out)).hexdigest(),
    }


def main():
    # STREAM frame: type 0x08 | OFF | LEN | FIN, id 3, offset 1200, 11 bytes.
    payload = bytes([0x0F]) + varint(3) + varint(1200) + varint(11) + b"hello world"
    crypto = [
        crypto_vector(n, bytes(range(1, 33)), bytes(range(100, 132)), "c0ffee0001", pn, payload)
        for n in AEADS for pn in (0, 1023, 1024, 0x1_0000_0005)
    ]
    doc = {
        "varints": [{"value": v, "hex": varint(v).hex()} for v in VARINTS],
        "frames": [{"frame": f, "hex": frame_bytes(f).hex()} for f in FRAMES],
        "transport_params": [{"params": p, "hex": params_bytes(p).hex()} for p in PARAMS],
        "crypto": crypto,
    }
    with open("golden.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
