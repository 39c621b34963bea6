from setuptools import setup

package_name = 'fewshot_detpose'

setup(
    name=package_name,
    version='0.1.0',
    packages=[package_name],
    package_data={package_name: ['cfg/*.yaml']},
    install_requires=[
        'setuptools',
        'numpy',
        'opencv-python==4.8.1.78',
        'torch',
        'torchvision',
        'ultralytics==8.1.29',
        'pyyaml',
        'pandas',
        'tabulate',
    ],
    zip_safe=True,
    maintainer='fewshot_detpose contributors',
    maintainer_email='fewshot-detpose@users.noreply.github.com',
    description='Few-shot object detection and viewpoint estimation on synthetic scenes',
    license='GPL-3',
    tests_require=['pytest', 'flake8', 'scipy'],
    entry_points={
        'console_scripts': [
                'fewshot_detpose = fewshot_detpose.cli:main',
        ],
    },
)
