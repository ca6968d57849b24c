"""Address map shared by the simulator, the firmware and the attacker.

Flash geometry and the top-of-flash page assignments mirror an nRF52840-class
part; everything else is a local choice.
"""

PAGE_SIZE = 0x1000

FLASH_BASE = 0x0000_0000
FLASH_SIZE = 0x10_0000  # 1 MiB, 256 pages
RAM_BASE = 0x2000_0000
RAM_SIZE = 0x4_0000  # 256 KiB
RAM_END = RAM_BASE + RAM_SIZE
STACK_TOP = RAM_END

# -- flash layout ------------------------------------------------------------
BOOT_BASE = 0x0000_0000  # vector table: initial sp, reset entry
BOOT_CODE = 0x0000_0040
RIOT_BASE = 0x0000_1000
RIOT_LEN = 0x1000
SIG_BASE = 0x0000_2000  # secure-boot signature block
RIOT_SIG = SIG_BASE
APP_SIG = SIG_BASE + 0x40
VENDOR_KEY = SIG_BASE + 0x80
PROTECTED_END = 0x0000_4000  # boot + riot + signatures, ACL no-write

APP_BASE = 0x0001_0000
APP_END = 0x0004_0000
APP_LEN = APP_END - APP_BASE
APP_HEADER_MAGIC = 0x4150_5031  # "APP1"
APP_CODE = APP_BASE + 0x100
LIB_BASE = 0x0002_0000
SCHED_INIT_PAGE = 0x0003_4000
TIMER_INIT_PAGE = 0x0003_5000
APP_DATA = 0x0003_8000

COUNTER_PAGE = 0x000F_A000
USEFUL_MALWARE_PAGE = 0x000F_B000
RAM2FLASH_PAGE = 0x000F_C000
PERSIST_PAGE = 0x000F_D000
FLASH2RAM_PAGE = 0x000F_E000
UDS_PAGE = 0x000F_F000
UDS_LEN = 32

# -- RAM layout --------------------------------------------------------------
CDI_RAM = 0x2000_0000
ALIAS_KEY_RAM = 0x2000_0100
ALIAS_CERT_RAM = ALIAS_KEY_RAM + 32
SCHED_STATE = 0x2000_0400
TIMER_STATE = 0x2000_0410
SENTINEL_RAM = 0x2000_0500
RX_LEN = 0x2000_0FFC
RX_BUF = 0x2000_1000
RX_BUF_LEN = 1280
SCRATCH_RAM = 0x2001_0000  # free RAM the attacker uses as a page buffer

# -- peripherals -------------------------------------------------------------
PERIPH_BASE = 0x4000_0000
RETAINED_BASE = 0x4000_0500  # 4 words that survive soft reset
RETAINED_WORDS = 4
NVMC_BASE = 0x4001_E000
NVMC_READY = NVMC_BASE + 0x400
NVMC_CONFIG = NVMC_BASE + 0x504
NVMC_ERASEPAGE = NVMC_BASE + 0x508
ACL_BASE = 0x4001_F000
ACL_REGIONS = 8
AWDT_BASE = 0x4003_0000
AWDT_PERIOD = AWDT_BASE + 0x0
AWDT_CTRL = AWDT_BASE + 0x4
AIRCR = 0xE000_ED0C
AIRCR_RESET = 0x05FA_0004  # VECTKEY | SYSRESETREQ

NVMC_REN = 0
NVMC_WEN = 1
NVMC_EEN = 2

ACL_NO_WRITE = 0b010
ACL_NO_READ_NO_WRITE = 0b110


def acl_addr(region: int) -> int:
    return ACL_BASE + 0x800 + region * 0x10


def page_of(addr: int) -> int:
    return addr & ~(PAGE_SIZE - 1)
