"""Seeded benign traffic used to measure false positives."""

from __future__ import annotations

import random
import string

BACKGROUND_KINDS = ("uniform_random", "ascii_text", "http_like")

_WORDS = (
    "the of and to in is that for it as was with be by on not he this are or his from at which "
    "but have an they you were her she there one all we their been has when who will more no if "
    "out so said what up its about into than them can only other new some could time these two "
    "may then do first any my now such like our over man me even most made after also did many "
    "before must through back years where much your way well down should because each just "
    "those people how too little state good very make world still own see men work long get "
    "here between both life being under never day same another know while last might us great "
    "old year off come since against go came right used take three network packet server client "
    "request header stream buffer protocol session address window length value data"
).split()

_METHODS = ("GET", "POST", "HEAD", "PUT", "OPTIONS")
_AGENTS = (
    "Mozilla/5.0 (Windows NT 6.1; rv:2.0) Gecko/20100101 Firefox/4.0",
    "Mozilla/4.0 (compatible; MSIE 7.0; Windows NT 5.1)",
    "curl/7.19.7",
    "Wget/1.12 (linux-gnu)",
    "Opera/9.80 (X11; Linux x86_64) Presto/2.7.62",
)
_MIME = ("text/html", "application/xml", "image/png", "*/*", "application/json", "text/plain")
_TOKEN = string.ascii_letters + string.digits


def _sentence(rng: random.Random) -> str:
    words = [rng.choice(_WORDS) for _ in range(rng.randint(4, 18))]
    words[0] = words[0].capitalize()
    if rng.random() < 0.2:
        words.insert(rng.randrange(len(words)), str(rng.randint(1, 9999)))
    return " ".join(words) + rng.choice(".....!?;:")


def _ascii_text(rng: random.Random, length: int) -> bytes:
    parts: list[str] = []
    size = 0
    while size < length:
        para = " ".join(_sentence(rng) for _ in range(rng.randint(2, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:length]


def _token(rng: random.Random, lo: int, hi: int) -> str:
    return "".join(rng.choice(_TOKEN) for _ in range(rng.randint(lo, hi)))


def _http_request(rng: random.Random) -> str:
    method = rng.choice(_METHODS)
    path = "/" + "/".join(rng.choice(_WORDS) for _ in range(rng.randint(1, 4)))
    if rng.random() < 0.5:
        path += f"?{rng.choice(_WORDS)}={_token(rng, 1, 12)}&id={rng.randint(0, 99999)}"
    host = f"{rng.choice(_WORDS)}.{rng.choice(('com', 'org', 'net', 'example'))}"
    lines = [
        f"{method} {path} HTTP/1.{rng.randint(0, 1)}",
        f"Host: www.{host}",
        f"User-Agent: {rng.choice(_AGENTS)}",
        f"Accept: {rng.choice(_MIME)},*/*;q=0.{rng.randint(1, 9)}",
        "Accept-Language: en-us,en;q=0.5",
        f"Connection: {rng.choice(('keep-alive', 'close'))}",
    ]
    if rng.random() < 0.6:
        lines.append(f"Cookie: session={_token(rng, 16, 32)}; pref={rng.choice(_WORDS)}")
    if rng.random() < 0.4:
        lines.append(f"Referer: http://{host}/{rng.choice(_WORDS)}.html")
    body = ""
    if method in ("POST", "PUT"):
        body = "&".join(f"{rng.choice(_WORDS)}={_token(rng, 1, 10)}" for _ in range(rng.randint(1, 8)))
        lines.append("Content-Type: application/x-www-form-urlencoded")
        lines.append(f"Content-Length: {len(body)}")
    return "\r\n".join(lines) + "\r\n\r\n" + body


def generate_background(kind: str, length: int, seed: int) -> bytes:
    """Benign bytes of the given ``kind``, a pure function of ``(kind, length, seed)``.

    ``ascii_text`` stays within printable ASCII plus newline; ``http_like``
    is a run of request heads (with form bodies for POST/PUT) cut to length.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = random.Random(f"{kind}:{seed}")
    if kind == "uniform_random":
        return rng.randbytes(length)
    if kind == "ascii_text":
        return _ascii_text(rng, length)
    if kind == "http_like":
        parts: list[str] = []
        size = 0
        while size < length:
            request = _http_request(rng)
            parts.append(request)
            size += len(request)
        return "".join(parts).encode("ascii")[:length]
    raise ValueError(f"unknown background kind {kind!r}")
