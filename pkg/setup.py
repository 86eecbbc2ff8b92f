import sys

from setuptools import find_packages

# cx_Freeze 仅在打包可执行文件时使用；pip 安装走普通 setuptools
FREEZE = any(cmd in sys.argv for cmd in ("build_exe", "bdist_msi", "bdist_mac", "bdist_dmg", "bdist_appimage", "bdist_rpm", "bdist_deb"))
if FREEZE:
    from cx_Freeze import setup, Executable
else:
    from setuptools import setup

# 构建选项
build_exe_options = {
    "packages": ["ui", "core", "core.augment", "utils", "numpy", "scipy", "skimage", "nibabel", "pandas"],
    "includes": [
        "ui.cli",
        "core.volume",
        "core.nifti_io",
        "core.file_manager",
        "core.settings_manager",
        "core.image_processor",
        "core.metrics",
        "core.ensemble",
        "core.phantom",
        "core.augment.pipeline",
        "utils.validators",
        "utils.file_utils",
    ],
    "include_files": [
        ("config.json", "config.json"),
    ],
    "excludes": [
        "tkinter",
        "unittest",
        "pytest",
        "matplotlib",
    ],
}

if FREEZE:
    setup(
        name="NeuroVolve",
        version="1.0",
        description="脑肿瘤 MRI 体数据增强、融合与评估工具",
        options={"build_exe": build_exe_options},
        executables=[
            Executable(
                "src/main.py",
                base=None,
                target_name="neurovolve",
            )
        ]
    )
else:
    setup(
        name="NeuroVolve",
        version="1.0",
        description="脑肿瘤 MRI 体数据增强、融合与评估工具",
        package_dir={"": "src"},
        packages=find_packages("src"),
        py_modules=["main"],
        install_requires=["numpy", "scipy", "scikit-image", "nibabel", "pandas", "Pillow"],
    )
