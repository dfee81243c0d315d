import pytest

from bootforge.firm import CopyMethod, build_firm
from bootforge.modmath import Console, KeyRegistry, SignatureType, generate_keypair


@pytest.fixture(scope="session")
def key512():
    return generate_keypair(512, b"test-key-512")


@pytest.fixture(scope="session")
def key512_alt():
    return generate_keypair(512, b"test-key-512-alt")


@pytest.fixture(scope="session")
def slot_keys():
    keys = {}
    for console in Console:
        for sig_type in SignatureType:
            seed = f"slot-{console.value}-{sig_type.value}".encode()
            keys[(console, sig_type)] = generate_keypair(512, seed)
    return keys


@pytest.fixture(scope="session")
def registry(slot_keys):
    reg = KeyRegistry()
    for (console, sig_type), key in slot_keys.items():
        reg.assign(console, sig_type, key.public)
    return reg


@pytest.fixture(scope="session")
def nand_key(slot_keys):
    return slot_keys[(Console.RETAIL, SignatureType.NAND_BOOT)]


@pytest.fixture()
def plain_image():
    return build_firm(
        [(0x08006000, CopyMethod.CPU_MEMCPY, b"test payload " * 40)],
        arm9_entry=0x08006000,
        arm11_entry=0x08006000,
    )
